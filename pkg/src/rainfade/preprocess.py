"""Radar decomposition, streaming channel statistics, standardisation and auxiliary channels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChannelMismatch,
    IndexOutOfRange,
    InsufficientStats,
    TooFewSamples,
    ValueOutOfRange,
)
from .geo import CRS, GeoGrid

RADAR_MAX_CODE = 48
BAND_WIDTH = 16
STD_EPS = 1e-8


@dataclass
class WeatherChannels:
    rain: GeoGrid
    mix: GeoGrid
    snow: GeoGrid

    def as_list(self) -> list[GeoGrid]:
        return [self.rain, self.mix, self.snow]


RADAR_CHANNELS = ("rain", "mix", "snow")


def decompose_codes(codes: np.ndarray) -> np.ndarray:
    """Split radar codes 0..48 into a trailing (rain, mix, snow) axis of 0..16 intensities."""
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > RADAR_MAX_CODE or np.any(codes != np.round(codes))):
        raise ValueOutOfRange(f"radar codes must be integers in [0, {RADAR_MAX_CODE}]")
    v = codes.astype(np.int16)
    out = np.zeros(v.shape + (3,), dtype=np.float32)
    # bands: 1..16 rain, 17..32 mix, 33..48 snow; 0 means no precipitation
    band = np.where(v == 0, -1, (v - 1) // BAND_WIDTH)
    for k in range(3):
        sel = band == k
        out[..., k][sel] = v[sel] - k * BAND_WIDTH
    return out


def decompose_radar(r: GeoGrid) -> WeatherChannels:
    split = decompose_codes(r.values)
    grids = [r.with_values(split[..., k].astype(np.float64)) for k in range(3)]
    return WeatherChannels(*grids)


@dataclass
class ChannelStats:
    """Per-channel running count / mean / M2 (sum of squared deviations)."""

    count: np.ndarray
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, n_channels: int) -> "ChannelStats":
        return cls(np.zeros(n_channels, np.int64), np.zeros(n_channels), np.zeros(n_channels))

    @property
    def n_channels(self) -> int:
        return len(self.count)

    def variance(self) -> np.ndarray:
        if np.any(self.count < 2):
            raise InsufficientStats("sample variance needs at least two observations per channel")
        return self.m2 / (self.count - 1)

    def std(self) -> np.ndarray:
        return np.sqrt(self.variance())

    def push(self, channel: int, x: float) -> None:
        """Classic one-value Welford recurrence."""
        self.count[channel] += 1
        delta = x - self.mean[channel]
        self.mean[channel] += delta / self.count[channel]
        self.m2[channel] += delta * (x - self.mean[channel])

    def merge(self, other: "ChannelStats") -> "ChannelStats":
        """Chan et al. pairwise combination; returns a new object."""
        if other.n_channels != self.n_channels:
            raise ChannelMismatch(f"{self.n_channels} vs {other.n_channels} channels")
        n_a, n_b = self.count.astype(float), other.count.astype(float)
        n = n_a + n_b
        safe = np.where(n > 0, n, 1.0)
        delta = other.mean - self.mean
        mean = self.mean + delta * n_b / safe
        m2 = self.m2 + other.m2 + delta**2 * n_a * n_b / safe
        return ChannelStats(self.count + other.count, np.where(n > 0, mean, 0.0), np.where(n > 0, m2, 0.0))

    @classmethod
    def from_batch(cls, values: np.ndarray) -> "ChannelStats":
        """Two-pass moments of a (..., n_channels) block."""
        v = np.asarray(values, np.float64).reshape(-1, values.shape[-1])
        n = v.shape[0]
        if n == 0:
            return cls.empty(v.shape[1])
        mean = v.mean(axis=0)
        m2 = ((v - mean) ** 2).sum(axis=0)
        return cls(np.full(v.shape[1], n, np.int64), mean, m2)

    def to_dict(self) -> dict:
        return {"count": self.count.tolist(), "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["count"], np.int64), np.asarray(d["mean"], float), np.asarray(d["m2"], float))


def _frame_array(frame) -> np.ndarray:
    """Accept a list of GeoGrids or an (H, W, C) array; return (H, W, C)."""
    if isinstance(frame, StandardizedFrame):
        frame = frame.channels
    if isinstance(frame, (list, tuple)):
        return np.stack([np.asarray(g.values, np.float64) for g in frame], axis=-1)
    return np.asarray(frame)


def welford_update(stats: ChannelStats, frame) -> ChannelStats:
    """Fold one raw frame into ``stats``.

    The frame's pixels are reduced to per-channel moments and combined with the
    running state by the pairwise update, which is Welford's recurrence applied
    to a block instead of a single value.
    """
    arr = _frame_array(frame)
    if arr.shape[-1] != stats.n_channels:
        raise ChannelMismatch(f"frame has {arr.shape[-1]} channels, stats track {stats.n_channels}")
    return stats.merge(ChannelStats.from_batch(arr))


@dataclass
class StandardizedFrame:
    channels: list[GeoGrid]
    timestamp: int

    def __post_init__(self):
        first = self.channels[0]
        if any(not first.same_geometry(g) for g in self.channels[1:]):
            raise ChannelMismatch("standardised channels must share one geometry")

    def array(self) -> np.ndarray:
        return np.stack([g.values for g in self.channels], axis=-1)


def standardize_array(arr: np.ndarray, stats: ChannelStats, dtype=np.float32) -> np.ndarray:
    """Standardise a (..., C) array; zero-variance channels map to 0."""
    if arr.shape[-1] != stats.n_channels:
        raise ChannelMismatch(f"array has {arr.shape[-1]} channels, stats track {stats.n_channels}")
    std = stats.std()
    flat = std < STD_EPS
    scale = np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, std))
    out = (np.asarray(arr, np.float64) - stats.mean) * scale
    return out.astype(dtype)


def standardize(frame, stats: ChannelStats, timestamp: int = 0) -> StandardizedFrame:
    if isinstance(frame, StandardizedFrame):
        timestamp = frame.timestamp
        grids = frame.channels
    elif isinstance(frame, (list, tuple)):
        grids = list(frame)
    else:
        raise TypeError("standardize expects a list of GeoGrids or a StandardizedFrame")
    arr = standardize_array(_frame_array(grids), stats, dtype=np.float64)
    out = [g.with_values(arr[..., c]) for c, g in enumerate(grids)]
    return StandardizedFrame(out, timestamp)


def bucketize_beacon(history, n_b: int) -> np.ndarray:
    """Equal-population bucket boundaries: the k/n_b linear-interpolation quantiles."""
    h = np.asarray(history, np.float64)
    if n_b < 1:
        raise ValueError("n_b must be >= 1")
    if h.size < n_b:
        raise TooFewSamples(f"{h.size} samples cannot fill {n_b} buckets")
    if n_b == 1:
        return np.empty(0)
    return np.quantile(h, np.arange(1, n_b) / n_b, method="linear")


def assign_bucket(value, boundaries) -> np.ndarray | int:
    """Bucket index under (lo, hi] intervals, clamped to [0, n_b-1]."""
    idx = np.searchsorted(np.asarray(boundaries), value, side="left")
    return int(idx) if np.ndim(idx) == 0 else idx


@dataclass(frozen=True)
class PipelineConfig:
    n_goes: int = 2
    n_radar: int = 3
    n_g: int = 7
    n_b: int = 8
    n_p: int = 6
    aoi_pixels: int = 32
    horizon_minutes: int = 5
    label_step_minutes: int = 5

    def __post_init__(self):
        for name in ("n_goes", "n_radar", "n_g", "n_b", "n_p", "aoi_pixels", "horizon_minutes", "label_step_minutes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.aoi_pixels % 2:
            raise ValueError("aoi_pixels must be even")
        if self.horizon_minutes % self.label_step_minutes:
            raise ValueError("horizon_minutes must be a multiple of label_step_minutes")

    @property
    def n_aux(self) -> int:
        return self.n_g + self.n_b + 1

    def n_channels(self, source: str = "both") -> int:
        imagery = {"goes": self.n_goes, "radar": self.n_radar, "both": self.n_goes + self.n_radar}[source]
        return imagery + self.n_aux


def aux_vector(gateway_idx: int, current_state: bool, beacon_value: float, boundaries, cfg: PipelineConfig) -> np.ndarray:
    """Per-channel constants in assembly order: gateway one-hot, beacon one-hot, state."""
    if not 0 <= gateway_idx < cfg.n_g:
        raise IndexOutOfRange(f"gateway {gateway_idx} not in [0, {cfg.n_g})")
    if len(boundaries) != cfg.n_b - 1:
        raise ValueError(f"expected {cfg.n_b - 1} bucket boundaries, got {len(boundaries)}")
    v = np.empty(cfg.n_aux, np.float32)
    v[: cfg.n_g] = 0.0
    v[gateway_idx] = 1.0
    beacon = np.full(cfg.n_b, -1.0, np.float32)
    beacon[assign_bucket(beacon_value, boundaries)] = 1.0
    v[cfg.n_g : cfg.n_g + cfg.n_b] = beacon
    v[-1] = 1.0 if current_state else -1.0
    return v


def encode_aux_channels(
    gateway_idx: int,
    current_state: bool,
    beacon_value: float,
    boundaries,
    cfg: PipelineConfig,
    template: GeoGrid | None = None,
) -> list[GeoGrid]:
    if template is None:
        template = GeoGrid(np.zeros((cfg.aoi_pixels, cfg.aoi_pixels)), CRS.GEODETIC, 0.0, 0.0, 1.0, -1.0)
    vals = aux_vector(gateway_idx, current_state, beacon_value, boundaries, cfg)
    shape = template.values.shape
    return [template.with_values(np.full(shape, float(v))) for v in vals]
