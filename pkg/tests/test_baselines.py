import numpy as np
import pytest

from rainfade.baselines import (
    BeaconFeatures,
    beacon_windows,
    hinge_objective,
    load_svm,
    mlp_predict,
    mlp_train,
    save_svm,
    svm_predict,
    svm_train,
)
from rainfade.errors import EmptyDataset, ShapeMismatch, SingleClass
from rainfade.labeling import BeaconSeries
from rainfade.model import Network, NetworkConfig, gradient_check, load_checkpoint, mlp_layers


def separable(n=80, d=5, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2 == 1
    x = rng.normal(0, 0.3, (n, d))
    x[y] += 1.5
    return BeaconFeatures(x, y)


def test_features_validate_and_window():
    with pytest.raises(ShapeMismatch):
        BeaconFeatures(np.zeros((3, 2)), [True, False])
    s = BeaconSeries(0, 60 * np.arange(10), np.arange(10.0))
    w = beacon_windows(s, [60 * 5, 60 * 1], n_w=3, mean=1.0, std=2.0)
    np.testing.assert_array_equal(w[0], (np.array([3.0, 4.0, 5.0]) - 1) / 2)
    # early rows repeat the first sample
    np.testing.assert_array_equal(w[1], (np.array([0.0, 0.0, 1.0]) - 1) / 2)


def test_baselines_accept_only_beacon_features():
    with pytest.raises(TypeError):
        mlp_train(np.zeros((4, 3)))
    with pytest.raises(TypeError):
        svm_train(np.zeros((4, 3)))
    with pytest.raises(EmptyDataset):
        mlp_train(BeaconFeatures(np.zeros((0, 3)), []))


def test_mlp_separable_toy():
    f = separable()
    net = mlp_train(f, epochs=40, lr=1e-2, batch_size=16)
    p = mlp_predict(net, f)
    assert np.all((p >= 0.5) == f.labels)
    assert 0 < mlp_predict(net, f.x[0]) < 1


def test_mlp_constant_features_learn_prior():
    y = np.arange(200) % 4 == 0  # prior 0.25
    net = mlp_train(BeaconFeatures(np.zeros((200, 6)), y), epochs=60, lr=1e-2, batch_size=50)
    p = mlp_predict(net, np.zeros((1, 6)))
    assert p[0] == pytest.approx(0.25, abs=0.02)


def test_mlp_gradient_check():
    net = Network(NetworkConfig((8,), mlp_layers((32,)), 1, "he"), np.float64)
    x = np.random.default_rng(2).normal(size=(6, 8))
    worst, _ = gradient_check(net, x, np.array([0, 1, 1, 0, 1, 0]))
    assert worst < 1e-4


def test_svm_symmetric_points():
    f = BeaconFeatures(np.array([[-1.0], [1.0]]), [False, True])
    m = svm_train(f, C=10.0, epochs=500)
    assert abs(m.b / m.w[0]) < 0.1
    assert svm_predict(m, f)[1].tolist() == [-1, 1]
    with pytest.raises(SingleClass):
        svm_train(BeaconFeatures(np.ones((3, 1)), [True] * 3))


def test_svm_objective_non_increasing():
    f = separable(seed=3)
    hist = svm_train(f, epochs=300).objective_history
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]


@pytest.mark.parametrize("seed", range(3))
def test_svm_near_grid_optimum_1d(seed):
    rng = np.random.default_rng(seed)
    y = rng.random(40) < 0.5
    x = (rng.normal(0, 1, 40) + 1.2 * np.where(y, 1, -1))[:, None]
    f = BeaconFeatures(x, y)
    C = 1.0
    m = svm_train(f, C=C, epochs=3000, lr=0.5)
    ypm = np.where(y, 1.0, -1.0)
    lam = 1.0 / (C * len(y))
    ws, bs = np.meshgrid(np.linspace(-1, 4, 501), np.linspace(-3, 3, 601), indexing="ij")
    margins = 1.0 - ypm[None, None, :] * (ws[..., None] * x[:, 0] + bs[..., None])
    grid = 0.5 * lam * ws**2 + np.maximum(margins, 0).mean(axis=-1)
    best = grid.min()
    got = hinge_objective(m.w, m.b, x, ypm, lam)
    assert got <= best * 1.01


def test_svm_scale_equivalence():
    f = separable(seed=4)
    a = svm_train(f, C=1.0, epochs=2000)
    b = svm_train(BeaconFeatures(2 * f.x, f.labels), C=0.25, epochs=2000)
    assert np.array_equal(svm_predict(a, f)[1], svm_predict(b, 2 * f.x)[1])


def test_svm_calibrated_and_saved(tmp_path):
    f = separable(seed=5)
    m = svm_train(f)
    p = m.proba(f.x)
    assert np.all((p > 0) & (p < 1))
    assert p[f.labels].mean() > p[~f.labels].mean()
    save_svm(tmp_path / "s.rfm", m)
    desc, params = load_checkpoint(tmp_path / "s.rfm")
    back = load_svm(desc, params)
    assert desc["kind"] == "svm"
    np.testing.assert_allclose(back.proba(f.x), p, atol=1e-5)
