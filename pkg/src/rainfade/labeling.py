"""Beacon series handling: clear-sky thresholds, window minima and fade labels.

All windows are half-open ``(lo, hi]``. Timestamps are integer UTC seconds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyBin, NoData

DAY = 86_400
CURRENT_WINDOW_MINUTES = 5


@dataclass
class BeaconSeries:
    gateway_idx: int
    times: np.ndarray  # int64 seconds, strictly ascending
    power_db: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, np.int64)
        self.power_db = np.asarray(self.power_db, np.float64)
        if self.times.shape != self.power_db.shape or self.times.ndim != 1:
            raise DataError("times and powers must be 1-D arrays of equal length")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise DataError("beacon timestamps must be strictly ascending")
        if not np.all(np.isfinite(self.power_db)):
            raise DataError("beacon powers must be finite")

    def __len__(self) -> int:
        return self.times.size


def _parse_time(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_time(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def read_beacon_csv(path, gateway_idx: int) -> BeaconSeries:
    """Load ``timestamp_iso8601,power_db`` records; the first line is a header."""
    times, powers = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        header = fh.readline()
        if not header.strip():
            raise DataError(f"{path}:1: missing header line")
        try:
            _parse_time(header.split(",")[0])
        except ValueError:
            pass
        else:
            raise DataError(f"{path}:1: expected a header line, found a data record")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split(",")
            try:
                if len(parts) != 2:
                    raise ValueError("expected 2 fields")
                times.append(_parse_time(parts[0]))
                powers.append(float(parts[1]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed beacon record ({exc})") from None
    return BeaconSeries(gateway_idx, np.array(times, np.int64), np.array(powers))


def write_beacon_csv(path, series: BeaconSeries) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_iso8601", "power_db"])
        for t, p in zip(series.times, series.power_db):
            w.writerow([format_time(t), repr(float(p))])


@dataclass
class ClearSkyModel:
    bin_minutes: int
    thresholds: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, np.float64)
        if 1440 % self.bin_minutes:
            raise ValueError("bin_minutes must divide 1440")
        if self.thresholds.shape != (1440 // self.bin_minutes,):
            raise ValueError("need one threshold per time-of-day bin")
        if not np.all(np.isfinite(self.thresholds)):
            raise ValueError("thresholds must be finite")

    def bin_of(self, times) -> np.ndarray:
        return (np.asarray(times, np.int64) % DAY) // (self.bin_minutes * 60)

    def threshold_at(self, times) -> np.ndarray:
        return self.thresholds[self.bin_of(times)]

    def to_dict(self) -> dict:
        return {"bin_minutes": self.bin_minutes, "thresholds": self.thresholds.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ClearSkyModel":
        return cls(int(d["bin_minutes"]), np.asarray(d["thresholds"], float))


def derive_clear_sky_threshold(
    series: BeaconSeries, bin_minutes: int = 30, halflife_days: float = 7.0, margin_db: float = 3.0
) -> ClearSkyModel:
    """Exponentially day-weighted mean of per-(day, bin) median power, minus a margin.

    Day weights are ``0.5 ** (age / halflife_days)`` with age counted in days
    back from the newest day in the series.
    """
    n_bins = 1440 // bin_minutes
    if len(series) == 0:
        raise EmptyBin("empty beacon series")
    days = series.times // DAY
    bins = (series.times % DAY) // (bin_minutes * 60)
    newest = days.max()
    order = np.lexsort((series.power_db, bins, days))
    d, b, p = days[order], bins[order], series.power_db[order]
    keys = d * n_bins + b
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    ends = np.r_[starts[1:], keys.size]
    # per-group median from the sorted powers
    lo = starts + (ends - starts - 1) // 2
    hi = starts + (ends - starts) // 2
    med = 0.5 * (p[lo] + p[hi])
    w = 0.5 ** ((newest - d[starts]) / halflife_days)
    num = np.bincount(b[starts], weights=w * med, minlength=n_bins)
    den = np.bincount(b[starts], weights=w, minlength=n_bins)
    if np.any(den == 0):
        missing = np.flatnonzero(den == 0)
        raise EmptyBin(f"time-of-day bins without data: {missing[:5].tolist()}")
    return ClearSkyModel(bin_minutes, num / den - margin_db)


class RangeMin:
    """Sparse table for O(1) minimum queries over index ranges [lo, hi)."""

    def __init__(self, values: np.ndarray):
        v = np.asarray(values, np.float64)
        self.levels = [v]
        k = 1
        while 2 * k <= v.size:
            prev = self.levels[-1]
            self.levels.append(np.minimum(prev[:-k], prev[k:]))
            k *= 2

    def query(self, lo, hi) -> np.ndarray:
        lo = np.asarray(lo, np.int64)
        hi = np.asarray(hi, np.int64)
        length = hi - lo
        if np.any(length <= 0):
            raise NoData("empty window")
        level = np.floor(np.log2(length)).astype(np.int64)
        out = np.empty(lo.shape)
        for lv in np.unique(level):
            sel = level == lv
            tab = self.levels[lv]
            out[sel] = np.minimum(tab[lo[sel]], tab[hi[sel] - (1 << lv)])
        return out


def window_min(series: BeaconSeries, t: int, window_minutes: float) -> float:
    lo = np.searchsorted(series.times, t - window_minutes * 60, side="right")
    hi = np.searchsorted(series.times, t, side="right")
    if hi <= lo:
        raise NoData(f"no beacon samples in ({t - window_minutes * 60}, {t}]")
    return float(series.power_db[lo:hi].min())


@dataclass
class LabeledInstants:
    """Column-oriented list of labelled instants for one gateway."""

    gateway_idx: int
    times: np.ndarray
    current_min: np.ndarray
    current_label: np.ndarray
    target_label: np.ndarray

    def __len__(self) -> int:
        return self.times.size

    def __iter__(self):
        for i in range(len(self)):
            yield LabeledInstant(
                int(self.times[i]), float(self.current_min[i]), bool(self.current_label[i]), bool(self.target_label[i])
            )


@dataclass(frozen=True)
class LabeledInstant:
    timestamp: int
    current_min: float
    current_label: bool
    target_label: bool


def instant_grid(series: BeaconSeries, step_minutes: int, horizon_minutes: int) -> np.ndarray:
    """Step-aligned instants t with t >= first sample and t + horizon <= last sample."""
    step = step_minutes * 60
    if len(series) == 0:
        return np.empty(0, np.int64)
    first = -(-int(series.times[0]) // step) * step
    last = int(series.times[-1]) - horizon_minutes * 60
    if last < first:
        return np.empty(0, np.int64)
    return np.arange(first, last + 1, step, dtype=np.int64)


def label_instants(
    series: BeaconSeries,
    model: ClearSkyModel,
    step_minutes: int = 1,
    horizon_minutes: int = 5,
    window_minutes: int = CURRENT_WINDOW_MINUTES,
) -> LabeledInstants:
    if horizon_minutes < 5 or step_minutes < 1:
        raise ValueError("need horizon_minutes >= 5 and step_minutes >= 1")
    t = instant_grid(series, step_minutes, horizon_minutes)
    ts = series.times
    rm = RangeMin(series.power_db)
    lo = np.searchsorted(ts, t - window_minutes * 60, side="right")
    hi = np.searchsorted(ts, t, side="right")
    if np.any(hi <= lo):
        bad = t[np.argmax(hi <= lo)]
        raise NoData(f"no beacon samples in the {window_minutes} min before {format_time(bad)}")
    current_min = rm.query(lo, hi) if t.size else np.empty(0)
    current_label = current_min < model.threshold_at(t)
    # future window (t, t + horizon], each sample against its own bin threshold
    excess = RangeMin(series.power_db - model.threshold_at(ts))
    f_lo = hi
    f_hi = np.searchsorted(ts, t + horizon_minutes * 60, side="right")
    target = np.zeros(t.size, bool)
    has = f_hi > f_lo
    if np.any(has):
        target[has] = excess.query(f_lo[has], f_hi[has]) < 0
    return LabeledInstants(series.gateway_idx, t, current_min, current_label, target)


def write_labels_csv(path, labels: LabeledInstants) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "gateway_idx", "current_min_db", "current_label", "target_label"])
        for i in range(len(labels)):
            w.writerow(
                [
                    int(labels.times[i]),
                    labels.gateway_idx,
                    repr(float(labels.current_min[i])),
                    int(labels.current_label[i]),
                    int(labels.target_label[i]),
                ]
            )


def read_labels_csv(path: Path) -> LabeledInstants:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    gw = int(rows[0, 1]) if rows.size else 0
    return LabeledInstants(
        gw,
        rows[:, 0].astype(np.int64),
        rows[:, 2].astype(float),
        rows[:, 3].astype(bool),
        rows[:, 4].astype(bool),
    )
