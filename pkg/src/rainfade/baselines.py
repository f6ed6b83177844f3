"""Beacon-history baselines: a multi-layer perceptron and a linear SVM.

Both consume only ``BeaconFeatures`` (windows of standardised beacon power),
never imagery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataset, ShapeMismatch, SingleClass
from .labeling import BeaconSeries
from .model import PROBA_EPS, ArrayData, Network, NetworkConfig, TrainConfig, mlp_layers, save_checkpoint, train

DEFAULT_WINDOW = 30


@dataclass
class BeaconFeatures:
    """Rows of the last ``n_w`` standardised beacon samples, one row per instant."""

    x: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, np.float64)
        self.labels = np.asarray(self.labels).astype(bool)
        if self.x.ndim != 2 or len(self.x) != len(self.labels):
            raise ShapeMismatch("features must be (N, n_w) with N labels")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("beacon features must be finite")

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "BeaconFeatures":
        return BeaconFeatures(self.x[idx], self.labels[idx])


def beacon_windows(series: BeaconSeries, instants, n_w: int = DEFAULT_WINDOW, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Last ``n_w`` samples at or before each instant, standardised; early rows are edge-padded."""
    ts = series.times
    hi = np.searchsorted(ts, np.asarray(instants, np.int64), side="right")
    idx = hi[:, None] + np.arange(-n_w, 0)[None, :]
    idx = np.clip(idx, 0, None)
    return (series.power_db[idx] - mean) / std


def _require(features):
    if not isinstance(features, BeaconFeatures):
        raise TypeError("baselines accept BeaconFeatures only")
    if len(features) == 0:
        raise EmptyDataset("no training rows")


# ---------------------------------------------------------------------------
# MLP


def mlp_train(
    features: BeaconFeatures,
    hidden=(32,),
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    max_steps_per_epoch: int | None = None,
) -> Network:
    _require(features)
    cfg = NetworkConfig((features.x.shape[1],), mlp_layers(hidden), seed, head_init="zeros")
    net = Network(cfg, np.float32)
    tc = TrainConfig(epochs=epochs, batch_size=batch_size, learning_rate=lr, seed=seed, max_steps_per_epoch=max_steps_per_epoch)
    train(net, ArrayData(features.x.astype(np.float32), features.labels), tc)
    return net


def mlp_predict(model: Network, feature) -> np.ndarray | float:
    x = feature.x if isinstance(feature, BeaconFeatures) else np.asarray(feature)
    if x.ndim == 1:
        return float(model.predict_proba(x[None].astype(np.float32))[0])
    return model.predict_proba(x.astype(np.float32))


# ---------------------------------------------------------------------------
# linear SVM


@dataclass
class LinearSVM:
    w: np.ndarray
    b: float
    calib_a: float = 1.0
    calib_c: float = 0.0
    objective_history: list | None = None

    def score(self, x) -> np.ndarray:
        return np.asarray(x, np.float64) @ self.w + self.b

    def proba(self, x) -> np.ndarray:
        p = _sigmoid(self.calib_a * self.score(x) + self.calib_c)
        return np.clip(p, PROBA_EPS, 1.0 - PROBA_EPS)


def _sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, np.float64)))


def hinge_objective(w, b, x, y_pm, lam) -> float:
    margins = 1.0 - y_pm * (x @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.maximum(margins, 0.0).mean())


def svm_train(features: BeaconFeatures, C: float = 1.0, epochs: int = 200, lr: float = 0.1) -> LinearSVM:
    """Full-batch subgradient descent on L2-regularised hinge loss, lambda = 1/(C*N).

    Step size ``lr / sqrt(epoch + 1)``. Subgradient steps are not monotone, so
    the best iterate seen is returned.
    """
    _require(features)
    y = np.where(features.labels, 1.0, -1.0)
    if np.all(y > 0) or np.all(y < 0):
        raise SingleClass("SVM needs both classes")
    x = features.x
    n, d = x.shape
    lam = 1.0 / (C * n)
    w = np.zeros(d)
    b = 0.0
    best = (hinge_objective(w, b, x, y, lam), w.copy(), b)
    history = [best[0]]
    for epoch in range(epochs):
        active = y * (x @ w + b) < 1.0
        gw = lam * w - (y[active] @ x[active]) / n
        gb = -y[active].sum() / n
        step = lr / np.sqrt(epoch + 1.0)
        w = w - step * gw
        b = b - step * gb
        obj = hinge_objective(w, b, x, y, lam)
        if obj < best[0]:
            best = (obj, w.copy(), b)
        history.append(best[0])
    model = LinearSVM(best[1], float(best[2]), objective_history=history)
    model.calib_a, model.calib_c = fit_logistic(model.score(x), features.labels)
    return model


def fit_logistic(scores, labels, iters: int = 50, ridge: float = 1e-6) -> tuple[float, float]:
    """Platt-style calibration p = sigmoid(a*score + c) by damped Newton steps."""
    s = np.asarray(scores, np.float64)
    t = np.asarray(labels, np.float64)
    X = np.column_stack([s, np.ones_like(s)])
    theta = np.zeros(2)
    for _ in range(iters):
        p = _sigmoid(X @ theta)
        grad = X.T @ (p - t) + ridge * theta
        hess = (X * (p * (1 - p))[:, None]).T @ X + ridge * np.eye(2)
        step = np.linalg.solve(hess, grad)
        theta -= step
        if np.max(np.abs(step)) < 1e-10:
            break
    return float(theta[0]), float(theta[1])


def svm_predict(model: LinearSVM, feature) -> tuple[np.ndarray, np.ndarray]:
    """(decision score, label in {-1, +1}); scores >= 0 map to +1."""
    x = feature.x if isinstance(feature, BeaconFeatures) else np.asarray(feature, np.float64)
    s = model.score(x)
    return s, np.where(s >= 0, 1, -1)


def save_svm(path, model: LinearSVM) -> None:
    params = [model.w.astype(np.float32), np.array([model.b, model.calib_a, model.calib_c], np.float32)]
    save_checkpoint(path, params, {"kind": "svm", "n_features": int(model.w.size)})


def load_svm(desc: dict, params) -> LinearSVM:
    w, extra = params
    return LinearSVM(w.astype(np.float64), float(extra[0]), float(extra[1]), float(extra[2]))
