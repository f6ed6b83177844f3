"""A small differentiable network library: 3-D convolution, pooling, dense layers,
softmax cross-entropy, Adam, a training loop and a binary checkpoint format.

Tensors are channel-last numpy arrays: volumes are ``(B, T, H, W, C)``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import CorruptHeader, EmptyDataset, MissingArtifact, NonDivisible, ShapeMismatch, StaleCache

log = logging.getLogger(__name__)

CE_EPS = 1e-12
PROBA_EPS = 1e-12


# ---------------------------------------------------------------------------
# functional kernels


def conv3d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Valid, stride-1 cross-correlation of (B,T,H,W,Cin) with (kT,kH,kW,Cin,Cout)."""
    if x.ndim == 4:
        return conv3d_forward(x[None], weight, bias)[0]
    kt, kh, kw, cin, cout = weight.shape
    b, t, h, w, c = x.shape
    if c != cin:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {cin}")
    if kt > t or kh > h or kw > w:
        raise ShapeMismatch(f"kernel {weight.shape[:3]} larger than input {x.shape[1:4]}")
    to, ho, wo = t - kt + 1, h - kh + 1, w - kw + 1
    out = np.zeros((b, to, ho, wo, cout), dtype=np.result_type(x, weight))
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                out += x[:, i : i + to, j : j + ho, k : k + wo, :] @ weight[i, j, k]
    if bias is not None:
        out += bias
    return out


def _conv3d_weight_grad(x: np.ndarray, dout: np.ndarray, kshape) -> np.ndarray:
    kt, kh, kw = kshape
    _, to, ho, wo, cout = dout.shape
    cin = x.shape[-1]
    dw = np.empty((kt, kh, kw, cin, cout), dtype=dout.dtype)
    d2 = dout.reshape(-1, cout)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                xs = x[:, i : i + to, j : j + ho, k : k + wo, :].reshape(-1, cin)
                dw[i, j, k] = xs.T @ d2
    return dw


def _conv3d_input_grad(dout: np.ndarray, weight: np.ndarray, in_shape) -> np.ndarray:
    kt, kh, kw = weight.shape[:3]
    _, to, ho, wo, _ = dout.shape
    dx = np.zeros(in_shape, dtype=dout.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                dx[:, i : i + to, j : j + ho, k : k + wo, :] += dout @ weight[i, j, k].T
    return dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _pool_windows(x: np.ndarray, window) -> np.ndarray:
    pt, ph, pw = window
    b, t, h, w, c = x.shape
    if t % pt or h % ph or w % pw:
        raise NonDivisible(f"pool window {tuple(window)} does not divide {x.shape[1:4]}")
    v = x.reshape(b, t // pt, pt, h // ph, ph, w // pw, pw, c)
    return v.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(b, t // pt, h // ph, w // pw, c, pt * ph * pw)


def maxpool3d(x: np.ndarray, window=(1, 2, 2)):
    """Blockwise max; returns (output, argmax-within-window)."""
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    win = _pool_windows(x, window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        return out[0], arg[0]
    return out, arg


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"input width {x.shape[-1]} vs weight rows {weight.shape[0]}")
    return x @ weight + bias


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, target) -> np.ndarray | float:
    """-log p[target], with p clamped at 1e-12 inside the log."""
    p = np.asarray(p, np.float64)
    if p.ndim == 1:
        return float(-math.log(max(p[int(target)], CE_EPS)))
    t = np.asarray(target, np.int64)
    return -np.log(np.maximum(p[np.arange(len(t)), t], CE_EPS))


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"
    params: list[np.ndarray] = []
    grads: list[np.ndarray] = []
    need_input_grad = True

    def output_shape(self, in_shape):
        return in_shape

    def pattern(self) -> bytes:
        """Discrete state of the last forward pass (ReLU masks, pool winners)."""
        return b""

    def describe(self) -> dict:
        return {"type": self.kind}


class Conv3D(Layer):
    kind = "conv3d"

    def __init__(self, in_channels: int, filters: int, kernel=(3, 3, 3), dtype=np.float32):
        self.kernel = tuple(int(k) for k in kernel)
        self.weight = np.zeros(self.kernel + (in_channels, filters), dtype)
        self.bias = np.zeros(filters, dtype)
        self.params = [self.weight, self.bias]
        self.grads = [np.zeros_like(self.weight), np.zeros_like(self.bias)]
        self._x = None

    def output_shape(self, in_shape):
        t, h, w, c = in_shape
        kt, kh, kw = self.kernel
        if c != self.weight.shape[3]:
            raise ShapeMismatch(f"conv3d expects {self.weight.shape[3]} channels, got {c}")
        if kt > t or kh > h or kw > w:
            raise ShapeMismatch(f"kernel {self.kernel} larger than input {in_shape[:3]}")
        return (t - kt + 1, h - kh + 1, w - kw + 1, self.weight.shape[4])

    def forward(self, x):
        self._x = x
        # channels that are constant over (T, H, W) in every sample contribute
        # value * sum(kernel) under valid padding; skip their sliding window
        flat = x.reshape(x.shape[0], -1, x.shape[-1])
        const = np.all(flat.max(axis=1) == flat.min(axis=1), axis=0)
        self._const = const
        if const.any() and not const.all():
            var = ~const
            out = conv3d_forward(np.ascontiguousarray(x[..., var]), self.weight[..., var, :], self.bias)
            cval = x[:, 0, 0, 0, const]
            out += (cval @ self.weight[..., const, :].sum(axis=(0, 1, 2)))[:, None, None, None, :]
            return out
        return conv3d_forward(x, self.weight, self.bias)

    def backward(self, dout):
        x, const = self._x, self._const
        self.grads[1][...] = dout.sum(axis=(0, 1, 2, 3))
        if const.any() and not const.all():
            var = ~const
            self.grads[0][..., var, :] = _conv3d_weight_grad(np.ascontiguousarray(x[..., var]), dout, self.kernel)
            cgrad = x[:, 0, 0, 0, const].T @ dout.sum(axis=(1, 2, 3))
            self.grads[0][..., const, :] = cgrad
        else:
            self.grads[0][...] = _conv3d_weight_grad(x, dout, self.kernel)
        if not self.need_input_grad:
            return None
        return _conv3d_input_grad(dout, self.weight, x.shape)

    def describe(self):
        return {"type": self.kind, "kernel": list(self.kernel), "filters": int(self.weight.shape[4])}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dout):
        return np.where(self._mask, dout, 0).astype(dout.dtype, copy=False)

    def pattern(self):
        return np.packbits(self._mask).tobytes()


class MaxPool3D(Layer):
    kind = "maxpool3d"

    def __init__(self, window=(1, 2, 2)):
        self.window = tuple(int(w) for w in window)

    def output_shape(self, in_shape):
        t, h, w, c = in_shape
        pt, ph, pw = self.window
        if t % pt or h % ph or w % pw:
            raise NonDivisible(f"pool window {self.window} does not divide {in_shape[:3]}")
        return (t // pt, h // ph, w // pw, c)

    def forward(self, x):
        self._shape = x.shape
        out, self._arg = maxpool3d(x, self.window)
        return out

    def backward(self, dout):
        b, t, h, w, c = self._shape
        pt, ph, pw = self.window
        k = pt * ph * pw
        win = np.zeros(dout.shape + (k,), dtype=dout.dtype)
        np.put_along_axis(win, self._arg[..., None], dout[..., None], axis=-1)
        win = win.reshape(b, t // pt, h // ph, w // pw, c, pt, ph, pw)
        return win.transpose(0, 1, 5, 2, 6, 3, 7, 4).reshape(self._shape)

    def pattern(self):
        return self._arg.astype(np.int8).tobytes()

    def describe(self):
        return {"type": self.kind, "window": list(self.window)}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, units: int, dtype=np.float32):
        self.weight = np.zeros((in_features, units), dtype)
        self.bias = np.zeros(units, dtype)
        self.params = [self.weight, self.bias]
        self.grads = [np.zeros_like(self.weight), np.zeros_like(self.bias)]

    def output_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.weight.shape[0]:
            raise ShapeMismatch(f"dense expects ({self.weight.shape[0]},), got {in_shape}")
        return (self.weight.shape[1],)

    def forward(self, x):
        self._x = x
        return dense_forward(x, self.weight, self.bias)

    def backward(self, dout):
        self.grads[0][...] = self._x.T @ dout
        self.grads[1][...] = dout.sum(axis=0)
        return dout @ self.weight.T

    def describe(self):
        return {"type": self.kind, "units": int(self.weight.shape[1])}


# ---------------------------------------------------------------------------
# network


@dataclass
class NetworkConfig:
    """Layer list plus input shape. A trailing softmax is implied by the loss."""

    input_shape: tuple
    layers: list = field(default_factory=list)
    seed: int = 0
    head_init: str = "zeros"

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": self.layers, "seed": self.seed, "head_init": self.head_init}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(tuple(d["input_shape"]), list(d["layers"]), int(d.get("seed", 0)), d.get("head_init", "zeros"))


def default_cnn_layers(filters=(16, 32), kernels=((3, 3, 3), (3, 4, 4)), pool=(1, 2, 2)) -> list[dict]:
    """conv -> relu -> pool, twice, then flatten -> dense(2) -> softmax."""
    layers = []
    for f, k in zip(filters, kernels):
        layers += [
            {"type": "conv3d", "kernel": list(k), "filters": int(f)},
            {"type": "relu"},
            {"type": "maxpool3d", "window": list(pool)},
        ]
    return layers + [{"type": "flatten"}, {"type": "dense", "units": 2}, {"type": "softmax"}]


def mlp_layers(hidden=(32,)) -> list[dict]:
    layers = []
    for h in hidden:
        layers += [{"type": "dense", "units": int(h)}, {"type": "relu"}]
    return layers + [{"type": "dense", "units": 2}, {"type": "softmax"}]


class Network:
    def __init__(self, config: NetworkConfig, dtype=np.float32, init: bool = True):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.layers: list[Layer] = []
        shape = tuple(config.input_shape)
        specs = list(config.layers)
        if not specs or specs[-1].get("type") != "softmax":
            raise ShapeMismatch("network must end with a softmax layer")
        for spec in specs[:-1]:
            kind = spec["type"]
            if kind == "conv3d":
                if len(shape) != 4:
                    raise ShapeMismatch(f"conv3d needs a (T,H,W,C) input, got {shape}")
                layer = Conv3D(shape[-1], spec["filters"], spec.get("kernel", (3, 3, 3)), self.dtype)
            elif kind == "relu":
                layer = ReLU()
            elif kind == "maxpool3d":
                layer = MaxPool3D(spec.get("window", (1, 2, 2)))
            elif kind == "flatten":
                layer = Flatten()
            elif kind == "dense":
                if len(shape) != 1:
                    raise ShapeMismatch(f"dense needs a flat input, got {shape}; add a flatten layer")
                layer = Dense(shape[0], spec["units"], self.dtype)
            elif kind == "softmax":
                raise ShapeMismatch("softmax may only appear last")
            else:
                raise ShapeMismatch(f"unknown layer type {kind!r}")
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        if shape != (2,):
            raise ShapeMismatch(f"final dense width must be 2, network produces {shape}")
        first_param = next((l for l in self.layers if l.params), None)
        for layer in self.layers:
            if layer is first_param:
                layer.need_input_grad = False
                break
        self._cache_version = None
        self._version = 0
        if init:
            self.initialize(config.seed)

    # parameters -----------------------------------------------------------
    @property
    def params(self) -> list[np.ndarray]:
        return [p for l in self.layers for p in l.params]

    @property
    def grads(self) -> list[np.ndarray]:
        return [g for l in self.layers for g in l.grads]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def initialize(self, seed: int) -> None:
        """He-uniform weights, zero biases; the output layer follows ``head_init``."""
        rng = np.random.default_rng(seed)
        weighted = [l for l in self.layers if l.params]
        for layer in weighted:
            w = layer.params[0]
            fan_in = int(np.prod(w.shape[:-1]))
            limit = math.sqrt(6.0 / fan_in)
            if layer is weighted[-1] and self.config.head_init == "zeros":
                w[...] = 0.0
            else:
                w[...] = rng.uniform(-limit, limit, size=w.shape)
            layer.params[1][...] = 0.0
        self.touch()

    def touch(self) -> None:
        """Mark parameters as modified; invalidates cached activations."""
        self._version += 1

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.params, values, strict=True):
            if p.shape != np.shape(v):
                raise ShapeMismatch(f"parameter shape {p.shape} vs {np.shape(v)}")
            p[...] = v
        self.touch()

    # passes ---------------------------------------------------------------
    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, self.dtype)
        expected = tuple(self.config.input_shape)
        if x.shape[1:] != expected:
            raise ShapeMismatch(f"input batch shape {x.shape[1:]} vs network input {expected}")
        for layer in self.layers:
            x = layer.forward(x)
        self._cache_version = self._version
        return x

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Fade probability (class 1) per row, kept strictly inside (0, 1)."""
        out = []
        for s in range(0, len(x), batch_size):
            z = self.logits(x[s : s + batch_size]).astype(np.float64)
            out.append(softmax(z)[:, 1])
        self._cache_version = None
        p = np.concatenate(out) if out else np.empty(0)
        return np.clip(p, PROBA_EPS, 1.0 - PROBA_EPS)

    def loss(self, x, y) -> float:
        p = softmax(self.logits(x).astype(np.float64))
        self._cache_version = None
        return float(cross_entropy(p, y).mean())

    def backward(self, probs: np.ndarray, y) -> None:
        """Gradients of mean cross-entropy from the cached forward pass."""
        if self._cache_version is None or self._cache_version != self._version:
            raise StaleCache("backward needs a forward pass with the current parameters")
        y = np.asarray(y, np.int64)
        n = len(y)
        rows = np.arange(n)
        d = probs.copy()
        d[rows, y] -= 1.0
        # the clamp inside the log has zero slope
        d[probs[rows, y] < CE_EPS] = 0.0
        d = (d / n).astype(self.dtype)
        for layer in reversed(self.layers):
            d = layer.backward(d)
            if d is None:
                break
        self._cache_version = None

    def loss_and_grads(self, x, y):
        z = self.logits(x)
        p = softmax(z.astype(np.float64))
        loss = float(cross_entropy(p, y).mean())
        self.backward(p, y)
        return loss, p

    def pattern(self) -> bytes:
        return b"".join(l.pattern() for l in self.layers)

    def descriptor(self) -> dict:
        return {"network": self.config.to_dict(), "param_shapes": [list(p.shape) for p in self.params]}


def build_cnn(input_shape, layers=None, seed=0, dtype=np.float32, head_init="zeros") -> Network:
    return Network(NetworkConfig(tuple(input_shape), layers or default_cnn_layers(), seed, head_init), dtype)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.v = [np.zeros_like(p, dtype=np.float64) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ShapeMismatch("parameter / gradient / state lists differ in length")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ShapeMismatch(f"shape mismatch {p.shape} / {g.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g, dtype=np.float64)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params, grads, state: Adam | None = None, lr: float = 1e-3) -> Adam:
    """Functional wrapper: updates ``params`` in place and returns the optimiser state."""
    if state is None:
        state = Adam(params, lr=lr)
    state.lr = lr
    state.step(params, grads)
    return state


# ---------------------------------------------------------------------------
# training


class BatchSource(Protocol):
    labels: np.ndarray

    def __len__(self) -> int: ...

    def batch(self, idx: np.ndarray) -> np.ndarray: ...


class ArrayData:
    def __init__(self, x: np.ndarray, labels):
        self.x = np.asarray(x)
        self.labels = np.asarray(labels).astype(np.int64)
        if len(self.x) != len(self.labels):
            raise ShapeMismatch("features and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def batch(self, idx):
        return self.x[idx]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    deterministic: bool = True
    seed: int = 0
    max_steps_per_epoch: int | None = None
    lr_decay: float = 1.0  # step size is multiplied by this after every epoch

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    train_f1: list = field(default_factory=list)
    eval_f1: list = field(default_factory=list)


def _f1(y_true, y_pred) -> float:
    tp = int(np.sum(y_true & y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def predict_dataset(net: Network, data: BatchSource, batch_size: int = 128) -> np.ndarray:
    out = []
    for s in range(0, len(data), batch_size):
        out.append(net.predict_proba(data.batch(np.arange(s, min(s + batch_size, len(data))))))
    return np.concatenate(out) if out else np.empty(0)


def train(net: Network, data: BatchSource, cfg: TrainConfig, eval_data: BatchSource | None = None) -> TrainHistory:
    """Mini-batch Adam on mean cross-entropy.

    Batch order comes from ``cfg.seed`` and the epoch number only, so a rerun
    with the same inputs reproduces the loss history exactly.
    """
    n = len(data)
    if n == 0:
        raise EmptyDataset("training set is empty")
    opt = Adam(net.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    hist = TrainHistory()
    labels = np.asarray(data.labels, np.int64)
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.learning_rate * cfg.lr_decay**epoch
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        steps = -(-n // bs)
        if cfg.max_steps_per_epoch:
            steps = min(steps, cfg.max_steps_per_epoch)
        total, seen = 0.0, 0
        y_seen, p_seen = [], []
        for s in range(steps):
            idx = np.sort(order[s * bs : (s + 1) * bs])
            y = labels[idx]
            loss, p = net.loss_and_grads(data.batch(idx), y)
            opt.step(net.params, net.grads)
            net.touch()
            total += loss * len(idx)
            seen += len(idx)
            y_seen.append(y.astype(bool))
            p_seen.append(p[:, 1] >= 0.5)
        hist.loss.append(total / seen)
        hist.train_f1.append(_f1(np.concatenate(y_seen), np.concatenate(p_seen)))
        if eval_data is not None and len(eval_data):
            probs = predict_dataset(net, eval_data)
            hist.eval_f1.append(_f1(np.asarray(eval_data.labels).astype(bool), probs >= 0.5))
        log.debug("epoch %d loss %.5f train_f1 %.4f", epoch, hist.loss[-1], hist.train_f1[-1])
    return hist


# ---------------------------------------------------------------------------
# gradient validation


def numerical_gradient(net: Network, x, y, h: float = 1e-4):
    """Central differences for every parameter; also flags coordinates where the
    perturbation flips a ReLU or pooling decision (a kink inside the stencil)."""
    net.loss(x, y)
    base = net.pattern()
    numeric, kinks = [], []
    for p in net.params:
        g = np.zeros(p.shape, np.float64)
        kink = np.zeros(p.shape, bool)
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            net.touch()
            lp = net.loss(x, y)
            pat_p = net.pattern()
            flat[i] = old - h
            net.touch()
            lm = net.loss(x, y)
            pat_m = net.pattern()
            flat[i] = old
            g.flat[i] = (lp - lm) / (2 * h)
            kink.flat[i] = pat_p != base or pat_m != base
        numeric.append(g)
        kinks.append(kink)
    net.touch()
    return numeric, kinks


def analytic_gradient(net: Network, x, y):
    net.loss_and_grads(x, y)
    return [g.astype(np.float64).copy() for g in net.grads]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradient_check(net: Network, x, y, h: float = 1e-4):
    """Return (max relative error over kink-free coordinates, number of kinked coordinates)."""
    analytic = analytic_gradient(net, x, y)
    numeric, kinks = numerical_gradient(net, x, y, h)
    worst, n_kinks = 0.0, 0
    for a, n, k in zip(analytic, numeric, kinks):
        n_kinks += int(k.sum())
        if (~k).any():
            worst = max(worst, float(relative_error(a[~k], n[~k]).max()))
    return worst, n_kinks


# ---------------------------------------------------------------------------
# checkpoints: b"RFM1" | u32 descriptor length | descriptor JSON | float32 LE params

CKPT_MAGIC = b"RFM1"


def save_checkpoint(path, params: Sequence[np.ndarray], descriptor: dict) -> None:
    desc = dict(descriptor)
    desc["param_shapes"] = [list(np.shape(p)) for p in params]
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return (descriptor, list of float32 arrays)."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{path} not found")
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC or len(buf) < 8:
        raise CorruptHeader(f"{path}: not an RFM1 checkpoint")
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        desc = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"{path}: bad descriptor ({exc})") from None
    pos = 8 + n
    params = []
    for shape in desc["param_shapes"]:
        count = int(np.prod(shape))
        if pos + 4 * count > len(buf):
            raise CorruptHeader(f"{path}: parameter data truncated")
        params.append(np.frombuffer(buf, "<f4", count, pos).reshape(shape).astype(np.float32))
        pos += 4 * count
    if pos != len(buf):
        raise CorruptHeader(f"{path}: {len(buf) - pos} trailing bytes")
    return desc, params


def save_network(net: Network, path, kind: str = "cnn3d", extra: dict | None = None) -> None:
    desc = {"kind": kind, **net.descriptor()}
    if extra:
        desc["extra"] = extra
    save_checkpoint(path, net.params, desc)


def load_network(path) -> tuple[Network, dict]:
    desc, params = load_checkpoint(path)
    if "network" not in desc:
        raise CorruptHeader(f"{path}: checkpoint holds a {desc.get('kind')!r} model, not a network")
    net = Network(NetworkConfig.from_dict(desc["network"]), np.float32, init=False)
    net.set_params(params)
    return net, desc
