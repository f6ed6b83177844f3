from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv3d_naive, dense_naive, maxpool_naive
from rainfade.errors import CorruptHeader, EmptyDataset, NonDivisible, ShapeMismatch, StaleCache
from rainfade.model import (
    Adam,
    ArrayData,
    Network,
    NetworkConfig,
    TrainConfig,
    adam_step,
    build_cnn,
    conv3d_forward,
    cross_entropy,
    default_cnn_layers,
    dense_forward,
    gradient_check,
    load_checkpoint,
    load_network,
    maxpool3d,
    mlp_layers,
    relu,
    save_checkpoint,
    save_network,
    softmax,
    train,
)


def tiny_net(seed=0, filters=(2, 3), head_init="he", dtype=np.float64):
    layers = default_cnn_layers(filters, kernels=((2, 3, 3), (2, 2, 2)))
    return Network(NetworkConfig((4, 8, 8, 3), layers, seed, head_init), dtype)


# ---------------------------------------------------------------------------
# kernels


def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(3, 5, 5, 1))
    out = conv3d_forward(x, np.ones((1, 1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_matches_loops_example():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 6, 6, 2))
    w = rng.normal(size=(2, 3, 3, 2, 1))
    b = rng.normal(size=1)
    np.testing.assert_allclose(conv3d_forward(x, w, b), conv3d_naive(x[None], w, b)[0], rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.integers(1, 2),
    st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)),
    st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(0, 2**31),
)
def test_conv_matches_loops_random_shapes(batch, extent, kernel, cin, cout, seed):
    kernel = tuple(min(k, e) for k, e in zip(kernel, extent))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch,) + extent + (cin,))
    w = rng.normal(size=kernel + (cin, cout))
    b = rng.normal(size=cout)
    np.testing.assert_allclose(conv3d_forward(x, w, b), conv3d_naive(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        conv3d_forward(np.zeros((2, 2, 2, 1)), np.zeros((3, 1, 1, 1, 1)))
    with pytest.raises(ShapeMismatch):
        conv3d_forward(np.zeros((2, 2, 2, 2)), np.zeros((1, 1, 1, 1, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 3, 5, 5, 2))
    w = rng.normal(size=(2, 2, 2, 2, 3))
    lhs = conv3d_forward(a * x + b * y, w)
    rhs = a * conv3d_forward(x, w) + b * conv3d_forward(y, w)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


def test_constant_channel_shortcut_matches_plain_conv():
    from rainfade.model import Conv3D

    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4, 6, 6, 4))
    x[..., 2] = rng.normal(size=(3, 1, 1, 1))  # constant per sample
    x[..., 3] = -1.0
    layer = Conv3D(4, 3, (2, 3, 3), np.float64)
    layer.weight[...] = rng.normal(size=layer.weight.shape)
    layer.bias[...] = rng.normal(size=3)
    out = layer.forward(x)
    np.testing.assert_allclose(out, conv3d_naive(x, layer.weight, layer.bias), rtol=1e-12, atol=1e-12)
    dout = rng.normal(size=out.shape)
    dx = layer.backward(dout)
    dw_fast = layer.grads[0].copy()
    layer._const[:] = False
    layer.backward(dout)
    np.testing.assert_allclose(dw_fast, layer.grads[0], rtol=1e-12, atol=1e-12)
    assert dx.shape == x.shape


def test_relu_and_pool_examples():
    assert np.all(relu(-np.arange(1.0, 10.0)) == 0)
    out, _ = maxpool3d(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert out.shape == (1, 1, 1, 1) and out.item() == 4.0
    with pytest.raises(NonDivisible):
        maxpool3d(np.zeros((1, 3, 3, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([(1, 2, 2), (2, 1, 1), (1, 1, 3), (2, 2, 2)]))
def test_pool_matches_loops_and_commutes_with_relu(seed, window):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2 * window[0], 2 * window[1], 3 * window[2], 2))
    out, _ = maxpool3d(x, window)
    np.testing.assert_array_equal(out, maxpool_naive(x, window))
    nn = np.abs(x)
    np.testing.assert_array_equal(relu(maxpool3d(nn, window)[0]), maxpool3d(relu(nn), window)[0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 20), st.integers(1, 4), st.integers(0, 2**31))
def test_dense_matches_loops(batch, n_in, n_out, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(batch, n_in)), rng.normal(size=(n_in, n_out)), rng.normal(size=n_out)
    np.testing.assert_allclose(dense_forward(x, w, b), dense_naive(x, w, b), rtol=1e-12, atol=1e-12)


def test_dense_width_mismatch():
    with pytest.raises(ShapeMismatch):
        dense_forward(np.zeros((1, 3)), np.zeros((4, 2)), np.zeros(2))


def test_softmax_examples():
    np.testing.assert_array_equal(softmax(np.array([3.0, 3.0])), [0.5, 0.5])
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-300 + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=2))
def test_softmax_sums_to_one(z):
    p = softmax(np.array(z))
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)
    # strictly inside (0, 1) while the gap is representable in float64
    if abs(z[0] - z[1]) < 30:
        assert np.all(p > 0) and np.all(p < 1)


def test_cross_entropy_examples():
    assert cross_entropy(np.array([0.5, 0.5]), 0) == pytest.approx(np.log(2), abs=1e-12)
    assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0
    # clamped, never infinite
    assert cross_entropy(np.array([1.0, 0.0]), 1) == pytest.approx(-np.log(1e-12))


def test_cross_entropy_matches_extended_precision():
    getcontext().prec = 50
    rng = np.random.default_rng(4)
    for _ in range(100):
        q = float(rng.uniform(1e-6, 1 - 1e-6))
        p = np.array([1 - q, q])
        t = int(rng.integers(0, 2))
        exact = -Decimal(repr(float(p[t]))).ln()
        assert cross_entropy(p, t) == pytest.approx(float(exact), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# backward


def test_zero_weight_bias_gradient_is_residual():
    net = Network(NetworkConfig((6,), mlp_layers((4,)), 0, "zeros"), np.float64)
    for p in net.params:
        p[...] = 0.0
    net.touch()
    x = np.ones((1, 6))
    for target in (0, 1):
        _, probs = net.loss_and_grads(x, [target])
        np.testing.assert_allclose(probs[0], [0.5, 0.5])
        np.testing.assert_allclose(net.layers[-1].grads[1], probs[0] - np.eye(2)[target], atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    net = tiny_net(seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 8, 8, 3))
    y = np.array([0, 1, 1])
    worst, kinks = gradient_check(net, x, y, h=1e-4)
    assert worst < 1e-4
    assert kinks < net.n_params() // 20


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_gradient_check_random_mlp_shapes(seed, hidden, width):
    layers = mlp_layers((hidden * 2,) * width)
    net = Network(NetworkConfig((5,), layers, seed, "he"), np.float64)
    x = np.random.default_rng(seed).normal(size=(4, 5))
    worst, _ = gradient_check(net, x, np.array([0, 1, 0, 1]))
    assert worst < 1e-4


def test_dead_relu_gives_zero_gradient():
    net = Network(NetworkConfig((3,), mlp_layers((4,)), 0, "he"), np.float64)
    hidden = net.layers[0]
    hidden.weight[...] = np.abs(hidden.weight)
    hidden.bias[...] = -100.0  # every pre-activation negative for small inputs
    net.touch()
    net.loss_and_grads(np.random.default_rng(0).uniform(0, 1, (5, 3)), np.array([0, 1, 0, 1, 1]))
    assert np.all(hidden.grads[0] == 0) and np.all(hidden.grads[1] == 0)


def test_backward_requires_fresh_forward():
    net = tiny_net()
    with pytest.raises(StaleCache):
        net.backward(np.full((1, 2), 0.5), [0])
    x = np.zeros((1, 4, 8, 8, 3))
    net.logits(x)
    net.params[0][...] += 1.0
    net.touch()
    with pytest.raises(StaleCache):
        net.backward(np.full((1, 2), 0.5), [0])


def test_network_shape_validation():
    with pytest.raises(ShapeMismatch):
        Network(NetworkConfig((4,), [{"type": "dense", "units": 3}, {"type": "softmax"}]))
    with pytest.raises(NonDivisible):
        Network(NetworkConfig((3, 6, 6, 1), default_cnn_layers((2, 2), ((1, 2, 2), (1, 1, 1)))))
    with pytest.raises(ShapeMismatch):
        tiny_net().logits(np.zeros((1, 4, 8, 8, 2)))


# ---------------------------------------------------------------------------
# optimiser and training


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0]), np.array([[3.0]])]
    before = [q.copy() for q in p]
    state = None
    for _ in range(5):
        state = adam_step(p, [np.zeros(2), np.zeros((1, 1))], state, lr=0.1)
    for a, b in zip(p, before):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ShapeMismatch):
        adam_step(p, [np.zeros(3), np.zeros((1, 1))], state)


def test_adam_constant_gradient_steps_lr_times_sign():
    p = [np.zeros(3)]
    opt = Adam(p, lr=0.01)
    g = [np.array([2.0, -0.5, 1e-3])]
    prev = p[0].copy()
    for _ in range(200):
        opt.step(p, g)
        step = p[0] - prev
        prev = p[0].copy()
    # with bias correction, m_hat = g and v_hat = g^2 exactly
    np.testing.assert_allclose(step, -0.01 * np.sign(g[0]), rtol=1e-4)


def separable_toy(n=64, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(0, 0.3, (n, 2, 5, 5, 1))
    x[y == 1] += 1.0
    return x, y


def test_untrained_zero_head_is_uninformative():
    x, _ = separable_toy()
    net = build_cnn(x.shape[1:], default_cnn_layers((2, 2), ((1, 2, 2), (1, 1, 1))), seed=0)
    np.testing.assert_allclose(net.predict_proba(x), 0.5, atol=1e-12)


def test_separable_toy_reaches_perfect_train_f1():
    x, y = separable_toy()
    net = build_cnn(x.shape[1:], default_cnn_layers((2, 2), ((1, 2, 2), (1, 1, 1))), seed=0)
    hist = train(net, ArrayData(x, y), TrainConfig(epochs=50, batch_size=16, learning_rate=1e-2))
    assert hist.train_f1[-1] == 1.0
    p = net.predict_proba(x)
    assert np.all((p > 0) & (p < 1))


def test_training_is_bit_reproducible():
    x, y = separable_toy()
    runs = []
    for _ in range(2):
        net = build_cnn(x.shape[1:], default_cnn_layers((2, 2), ((1, 2, 2), (1, 1, 1))), seed=3)
        hist = train(net, ArrayData(x, y), TrainConfig(epochs=3, batch_size=8, seed=5), ArrayData(x, y))
        runs.append((hist, [p.copy() for p in net.params]))
    assert runs[0][0].loss == runs[1][0].loss
    assert runs[0][0].eval_f1 == runs[1][0].eval_f1
    for a, b in zip(runs[0][1], runs[1][1]):
        assert a.tobytes() == b.tobytes()


def test_loss_mostly_non_increasing_across_seeds():
    ok = 0
    for seed in range(10):
        x, y = separable_toy(seed=seed)
        net = build_cnn(x.shape[1:], default_cnn_layers((2, 2), ((1, 2, 2), (1, 1, 1))), seed=seed, head_init="he")
        loss = train(net, ArrayData(x, y), TrainConfig(epochs=6, batch_size=16, learning_rate=1e-2, seed=seed)).loss
        ok += all(b <= a + 1e-3 for a, b in zip(loss, loss[1:]))
    assert ok >= 9


def test_train_rejects_empty_and_bad_config():
    net = build_cnn((2, 5, 5, 1), default_cnn_layers((2, 2), ((1, 2, 2), (1, 1, 1))))
    with pytest.raises(EmptyDataset):
        train(net, ArrayData(np.zeros((0, 2, 5, 5, 1)), []), TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_identical(tmp_path):
    net = tiny_net(1, dtype=np.float32)
    path = tmp_path / "m.rfm"
    save_network(net, path, extra={"horizon_minutes": 5})
    back, desc = load_network(path)
    assert desc["extra"]["horizon_minutes"] == 5
    for a, b in zip(net.params, back.params):
        assert a.tobytes() == b.tobytes()
    x = np.random.default_rng(0).normal(size=(2, 4, 8, 8, 3))
    assert net.predict_proba(x).tobytes() == back.predict_proba(x).tobytes()
    save_network(back, tmp_path / "again.rfm", extra={"horizon_minutes": 5})
    assert (tmp_path / "again.rfm").read_bytes() == path.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.rfm"
    save_checkpoint(path, [np.ones(3, np.float32)], {"kind": "test"})
    raw = path.read_bytes()
    (tmp_path / "magic.rfm").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.rfm").write_bytes(raw[:-4])
    (tmp_path / "long.rfm").write_bytes(raw + b"\0")
    for name in ("magic", "short", "long"):
        with pytest.raises(CorruptHeader):
            load_checkpoint(tmp_path / f"{name}.rfm")
    desc, params = load_checkpoint(path)
    assert desc["kind"] == "test" and params[0].tolist() == [1.0, 1.0, 1.0]
