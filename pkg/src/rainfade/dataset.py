"""Sample assembly, chronological split, class rebalancing and the on-disk sample format.

Sample shard layout (little-endian), repeated once per sample::

    b"RFS1" | u32 n_p | u32 H | u32 W | u32 C | u8 label | i64 timestamp | u32 gateway_idx
    | float32[n_p*H*W*C] row-major tensor

A dataset directory holds ``manifest.json`` plus ``samples-%05d.bin`` shards of
at most 4096 samples each.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CorruptHeader,
    DigestMismatch,
    EmptySplit,
    FrameGapTooLarge,
    GeometryMismatch,
    MissingArtifact,
    SingleClass,
)
from .preprocess import PipelineConfig, StandardizedFrame

SOURCES = ("goes", "radar")
SOURCE_MODES = ("goes", "radar", "both")
IMAGERY_CADENCE_S = 300
DEFAULT_STALENESS_S = 600

MAGIC = b"RFS1"
HEADER = struct.Struct("<4sIIIIBqI")
SHARD_SIZE = 4096


def mode_sources(mode: str) -> tuple[str, ...]:
    if mode == "both":
        return SOURCES
    if mode in SOURCES:
        return (mode,)
    raise ValueError(f"unknown input-source mode {mode!r}")


@dataclass
class Sample:
    tensor: np.ndarray  # (n_p, H, W, C) float32
    target_label: bool
    gateway_idx: int
    timestamp: int

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, np.float32)
        if self.tensor.ndim != 4:
            raise GeometryMismatch(f"sample tensor must be 4-D, got {self.tensor.shape}")


def select_frames(frame_times, instant: int, n_p: int, staleness_s: int = DEFAULT_STALENESS_S) -> np.ndarray:
    """Indices of the n_p frames ending with the newest one at or before ``instant``."""
    frame_times = np.asarray(frame_times, np.int64)
    newest = int(np.searchsorted(frame_times, instant, side="right")) - 1
    if newest < 0 or instant - frame_times[newest] > staleness_s:
        raise FrameGapTooLarge(f"no imagery within {staleness_s}s before {instant}")
    if newest + 1 < n_p:
        raise FrameGapTooLarge(f"only {newest + 1} frames available before {instant}, need {n_p}")
    return np.arange(newest - n_p + 1, newest + 1)


def assemble_sample(
    frames: dict[str, Sequence[StandardizedFrame]],
    aux_channels,
    target_label: bool,
    cfg: PipelineConfig,
    gateway_idx: int,
    timestamp: int,
    staleness_s: int = DEFAULT_STALENESS_S,
) -> Sample:
    """Stack n_p frames per imagery source with the auxiliary channels.

    Channel order per time step is fixed: GOES channels, radar channels, then
    the auxiliary block (gateway one-hot, beacon one-hot, fade state).
    ``aux_channels`` is a list of constant GeoGrids or a vector of their values.
    """
    size = cfg.aoi_pixels
    if not frames:
        raise ValueError("at least one imagery source is required")
    unknown = set(frames) - set(SOURCES)
    if unknown:
        raise ValueError(f"unknown imagery sources {sorted(unknown)}")
    parts = []
    for src in SOURCES:
        if src not in frames:
            continue
        seq = list(frames[src])
        if len(seq) != cfg.n_p:
            raise GeometryMismatch(f"{src}: expected {cfg.n_p} frames, got {len(seq)}")
        times = [f.timestamp for f in seq]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise GeometryMismatch(f"{src}: frames must be in ascending time order")
        if timestamp - times[-1] > staleness_s or times[-1] > timestamp:
            raise FrameGapTooLarge(f"{src}: newest frame at {times[-1]} is stale for instant {timestamp}")
        stack = np.stack([f.array() for f in seq]).astype(np.float32)
        if stack.shape[1:3] != (size, size):
            raise GeometryMismatch(f"{src}: frames are {stack.shape[1:3]}, expected {size}x{size}")
        parts.append(stack)
    if isinstance(aux_channels, (list, tuple)) and aux_channels and hasattr(aux_channels[0], "values"):
        aux = np.array([float(g.values.flat[0]) for g in aux_channels], np.float32)
    else:
        aux = np.asarray(aux_channels, np.float32)
    if aux.shape != (cfg.n_aux,):
        raise GeometryMismatch(f"expected {cfg.n_aux} auxiliary channels, got {aux.shape}")
    parts.append(np.broadcast_to(aux, (cfg.n_p, size, size, aux.size)))
    return Sample(np.concatenate(parts, axis=-1), bool(target_label), int(gateway_idx), int(timestamp))


# ---------------------------------------------------------------------------
# in-memory frame store and lazily assembled sample index


@dataclass
class GatewayFrames:
    """Standardised AoI frames of one gateway, per imagery source, shape (N, H, W, c)."""

    times: np.ndarray
    goes: np.ndarray
    radar: np.ndarray

    def source(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class SampleIndex:
    """Columnar description of samples; tensors are assembled on demand."""

    gateway_idx: np.ndarray
    timestamp: np.ndarray
    frame_idx: np.ndarray  # newest frame index in that gateway's store
    target: np.ndarray
    current_label: np.ndarray
    current_min: np.ndarray
    bucket: np.ndarray

    def __len__(self) -> int:
        return self.timestamp.size

    def take(self, idx) -> "SampleIndex":
        idx = np.asarray(idx)
        return SampleIndex(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def concat(cls, parts: Sequence["SampleIndex"]) -> "SampleIndex":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))

    def sort_by_time(self) -> "SampleIndex":
        return self.take(np.lexsort((self.gateway_idx, self.timestamp)))

    def class_counts(self) -> dict[str, int]:
        pos = int(np.count_nonzero(self.target))
        return {"0": len(self) - pos, "1": pos}


def aux_matrix(index: SampleIndex, cfg: PipelineConfig) -> np.ndarray:
    """Vectorised counterpart of ``preprocess.aux_vector`` for every row."""
    n = len(index)
    out = np.zeros((n, cfg.n_aux), np.float32)
    rows = np.arange(n)
    out[rows, index.gateway_idx] = 1.0
    out[:, cfg.n_g : cfg.n_g + cfg.n_b] = -1.0
    out[rows, cfg.n_g + index.bucket] = 1.0
    out[:, -1] = np.where(index.current_label, 1.0, -1.0)
    return out


def assemble_batch(store: Sequence[GatewayFrames], index: SampleIndex, mode: str, cfg: PipelineConfig) -> np.ndarray:
    """(B, n_p, H, W, C) float32 tensors; identical to ``assemble_sample`` row by row."""
    size = cfg.aoi_pixels
    sources = mode_sources(mode)
    n_img = sum(store[0].source(s).shape[-1] for s in sources)
    out = np.empty((len(index), cfg.n_p, size, size, n_img + cfg.n_aux), np.float32)
    offsets = np.arange(-cfg.n_p + 1, 1)
    for g in np.unique(index.gateway_idx):
        rows = np.flatnonzero(index.gateway_idx == g)
        fidx = index.frame_idx[rows][:, None] + offsets  # (b, n_p)
        c = 0
        for s in sources:
            arr = store[g].source(s)
            out[rows, ..., c : c + arr.shape[-1]] = arr[fidx]
            c += arr.shape[-1]
    out[..., n_img:] = aux_matrix(index, cfg)[:, None, None, None, :]
    return out


def materialize(store, index: SampleIndex, mode: str, cfg: PipelineConfig) -> list[Sample]:
    tensors = assemble_batch(store, index, mode, cfg)
    return [
        Sample(tensors[i], bool(index.target[i]), int(index.gateway_idx[i]), int(index.timestamp[i]))
        for i in range(len(index))
    ]


# ---------------------------------------------------------------------------
# split and rebalance


def chronological_split(samples, train_fraction: float = 0.8):
    """First floor(f*N) samples train, the rest test. Input must be time-ordered."""
    n = len(samples)
    if n < 2:
        raise EmptySplit(f"cannot split {n} sample(s)")
    times = _timestamps(samples)
    if np.any(np.diff(times) < 0):
        raise ValueError("samples must be in time order")
    k = math.floor(train_fraction * n)
    if isinstance(samples, SampleIndex):
        return samples.take(np.arange(k)), samples.take(np.arange(k, n))
    return list(samples[:k]), list(samples[k:])


def _timestamps(samples) -> np.ndarray:
    if isinstance(samples, SampleIndex):
        return samples.timestamp
    return np.array([s.timestamp for s in samples], np.int64)


def _labels(samples) -> np.ndarray:
    if isinstance(samples, SampleIndex):
        return samples.target.astype(bool)
    return np.array([bool(s.target_label) for s in samples])


def rebalance_plan(n_pos: int, n_neg: int, target_fraction: float = 0.5, period: int | None = None):
    """Choose (undersample period k, positive copies m).

    Negatives keep every k-th instance, positives are repeated m times. The
    automatic choice prefers k near the square root of the imbalance (so both
    sides share the correction) among plans whose fraction is within 0.05 of
    the target, and falls back to the closest plan otherwise.
    """
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"rebalance needs both classes (positives={n_pos}, negatives={n_neg})")
    odds = target_fraction / (1.0 - target_fraction)
    ratio = n_neg / n_pos * odds
    preferred = math.sqrt(ratio) if ratio > 1 else 1.0
    periods = [period] if period is not None else range(1, max(1, math.ceil(ratio)) + 1)
    plans = []
    for k in periods:
        kept_neg = -(-n_neg // k)
        want = kept_neg * odds / n_pos
        for m in sorted({max(1, math.floor(want)), max(1, math.ceil(want))}):
            miss = abs(m * n_pos / (m * n_pos + kept_neg) - target_fraction)
            plans.append((miss, abs(math.log(k / preferred)), k, m))
    close = [p for p in plans if p[0] <= 0.05]
    best = min(close, key=lambda p: (p[1], p[0])) if close else min(plans)
    return best[2], best[3]


def rebalance(train, target_positive_fraction: float = 0.5, undersample_period: int | None = None):
    """Periodic undersampling of negatives plus duplication of positives, in time order."""
    labels = _labels(train)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    k, m = rebalance_plan(n_pos, n_neg, target_positive_fraction, undersample_period)
    neg_rank = np.cumsum(~labels) - 1
    keep = []
    for i, lab in enumerate(labels):
        if lab:
            keep.extend([i] * m)
        elif neg_rank[i] % k == 0:
            keep.append(i)
    if isinstance(train, SampleIndex):
        return train.take(np.array(keep, np.int64))
    return [train[i] for i in keep]


def positive_fraction(samples) -> float:
    labels = _labels(samples)
    return float(labels.mean()) if labels.size else 0.0


# ---------------------------------------------------------------------------
# binary sample format


def encode_sample(s: Sample) -> bytes:
    n_p, h, w, c = s.tensor.shape
    head = HEADER.pack(MAGIC, n_p, h, w, c, int(bool(s.target_label)), int(s.timestamp), int(s.gateway_idx))
    return head + np.ascontiguousarray(s.tensor, dtype="<f4").tobytes()


def decode_samples(buf: bytes, name: str = "<buffer>") -> list[Sample]:
    out = []
    pos = 0
    while pos < len(buf):
        if len(buf) - pos < HEADER.size:
            raise CorruptHeader(f"{name}: truncated header at byte {pos}")
        magic, n_p, h, w, c, label, ts, gw = HEADER.unpack_from(buf, pos)
        if magic != MAGIC or label > 1:
            raise CorruptHeader(f"{name}: bad sample header at byte {pos}")
        pos += HEADER.size
        nbytes = 4 * n_p * h * w * c
        if len(buf) - pos < nbytes:
            raise CorruptHeader(f"{name}: tensor truncated at byte {pos}")
        tensor = np.frombuffer(buf, dtype="<f4", count=n_p * h * w * c, offset=pos).reshape(n_p, h, w, c)
        out.append(Sample(tensor.astype(np.float32), bool(label), gw, ts))
        pos += nbytes
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class DatasetManifest:
    config: dict
    sample_count: int
    class_counts: dict
    split_boundary_timestamp: int | None
    files: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if sum(int(v) for v in self.class_counts.values()) != self.sample_count:
            raise ValueError("class counts must sum to the sample count")

    def to_json(self) -> str:
        doc = {
            "format": "RFS1",
            "config": self.config,
            "sample_count": self.sample_count,
            "class_counts": self.class_counts,
            "split_boundary_timestamp": self.split_boundary_timestamp,
            "files": self.files,
        }
        doc.update(self.extra)
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            doc = json.loads(text)
            extra = {k: v for k, v in doc.items() if k not in {"format", "config", "sample_count", "class_counts", "split_boundary_timestamp", "files"}}
            return cls(
                doc["config"], int(doc["sample_count"]), doc["class_counts"], doc["split_boundary_timestamp"], doc["files"], extra
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise CorruptHeader(f"unreadable manifest: {exc}") from None


def write_dataset(samples: Sequence[Sample], manifest: DatasetManifest | None, directory) -> DatasetManifest:
    """Write shards and a manifest; the manifest's counts and digests are recomputed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for shard_no, start in enumerate(range(0, max(len(samples), 1), SHARD_SIZE)):
        chunk = samples[start : start + SHARD_SIZE]
        if not chunk:
            break
        name = f"samples-{shard_no:05d}.bin"
        with open(directory / name, "wb") as fh:
            for s in chunk:
                fh.write(encode_sample(s))
        files.append({"name": name, "count": len(chunk), "sha256": sha256_file(directory / name)})
    pos = sum(1 for s in samples if s.target_label)
    base = manifest or DatasetManifest({}, len(samples), {"0": len(samples) - pos, "1": pos}, None)
    out = DatasetManifest(
        base.config, len(samples), {"0": len(samples) - pos, "1": pos}, base.split_boundary_timestamp, files, base.extra
    )
    (directory / "manifest.json").write_text(out.to_json(), encoding="utf-8")
    return out


def read_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise MissingArtifact(f"{path} not found")
    manifest = DatasetManifest.from_json(path.read_text(encoding="utf-8"))
    samples = []
    for entry in manifest.files:
        shard = directory / entry["name"]
        if not shard.exists():
            raise MissingArtifact(f"{shard} not found")
        buf = shard.read_bytes()
        chunk = decode_samples(buf, entry["name"])
        if hashlib.sha256(buf).hexdigest() != entry["sha256"]:
            raise DigestMismatch(f"{entry['name']}: content digest does not match the manifest")
        if len(chunk) != entry["count"]:
            raise CorruptHeader(f"{entry['name']}: {len(chunk)} samples, manifest says {entry['count']}")
        samples.extend(chunk)
    return samples


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise MissingArtifact(f"{path} not found")
    return DatasetManifest.from_json(path.read_text(encoding="utf-8"))
