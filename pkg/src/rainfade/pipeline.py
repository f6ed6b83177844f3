"""End-to-end preparation, training and evaluation shared by the CLI and tests.

Raw imagery goes through: downsample to the common resolution, crop the AoI
around each gateway, decompose radar codes, accumulate channel statistics over
the training period, standardise. Samples are then described by a
``SampleIndex`` and their tensors assembled batch by batch.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from . import baselines
from .config import RunConfig
from .dataset import (
    GatewayFrames,
    SampleIndex,
    assemble_batch,
    chronological_split,
    mode_sources,
    rebalance,
)
from .errors import DataError, MissingArtifact, NonDivisible, SingleClass
from .evaluation import EvalRecord, confusion, metrics, roc_auc
from .geo import CRS, FixedGridProjection, GeoGrid, LatLon, aoi_window, downsample_grid
from .labeling import (
    BeaconSeries,
    ClearSkyModel,
    derive_clear_sky_threshold,
    format_time,
    label_instants,
    read_beacon_csv,
    write_beacon_csv,
)
from .model import Network, NetworkConfig, TrainConfig, default_cnn_layers, predict_dataset, train
from .preprocess import (
    ChannelStats,
    PipelineConfig,
    assign_bucket,
    bucketize_beacon,
    decompose_codes,
    standardize_array,
    welford_update,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# raw data access


class RawSource(Protocol):
    """Anything that yields raw imagery chunks and beacon series per gateway."""

    gateways: list
    proj: object

    def templates(self, g: int) -> tuple[GeoGrid, GeoGrid, GeoGrid, int]: ...  # goes fine, goes coarse, radar fine, radar factor

    def chunks(self, g: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]: ...

    def beacon(self, g: int) -> BeaconSeries: ...


class EpisodeSource:
    """Adapter from a synthetic ``Episode`` to ``RawSource``."""

    def __init__(self, episode):
        self.episode = episode
        self.gateways = episode.gateways
        self.proj = episode.proj

    def templates(self, g):
        geo = self.episode.geometry[g]
        return geo.goes_fine, geo.goes_coarse, geo.radar_fine, self.episode.params.radar_fine_factor

    def chunks(self, g):
        for c in range(self.episode.n_chunks):
            times, refl, btemp = self.episode.goes_chunk(g, c)
            _, codes = self.episode.radar_chunk(g, c)
            yield times, refl, btemp, codes

    def beacon(self, g):
        return self.episode.beacon(g)


def downsample_stack(stack: np.ndarray, factor: int) -> np.ndarray:
    """Block mean over axes 1 and 2 of an (N, H, W, ...) stack; matches ``downsample_grid`` per frame."""
    if factor == 1:
        return stack.astype(np.float64)
    h, w = stack.shape[1:3]
    if h % factor or w % factor:
        raise NonDivisible(f"{h}x{w} stack is not divisible by {factor}")
    out = np.zeros((stack.shape[0], h // factor, w // factor) + stack.shape[3:])
    for a in range(factor):
        for b in range(factor):
            out += stack[:, a::factor, b::factor]
    return out / (factor * factor)


def _factor(fine: GeoGrid, coarse_step: float) -> int:
    f = round(abs(coarse_step / fine.step_y))
    return max(f, 1)


def gateway_aoi_frames(src: RawSource, g: int, cfg: PipelineConfig):
    """Raw chunks -> (times, goes (N,S,S,2), radar (N,S,S,3)) un-standardised AoI frames."""
    fine, coarse, radar_fine, radar_factor = src.templates(g)
    gw = src.gateways[g]
    goes_factor = _factor(fine, coarse.step_y)
    radar_coarse = downsample_grid(radar_fine, radar_factor)
    if downsample_grid(fine, goes_factor).values.shape != coarse.values.shape:
        raise ValueError("fine and coarse satellite tiles do not align")
    g_rows, g_cols = aoi_window(coarse, gw, cfg.aoi_pixels, src.proj)
    r_rows, r_cols = aoi_window(radar_coarse, gw, cfg.aoi_pixels)
    times, goes, radar = [], [], []
    for t, refl, btemp, codes in src.chunks(g):
        refl_c = downsample_stack(refl, goes_factor)
        goes.append(np.stack([refl_c[:, g_rows, g_cols], btemp[:, g_rows, g_cols]], axis=-1).astype(np.float32))
        wx = downsample_stack(decompose_codes(codes), radar_factor)
        radar.append(wx[:, r_rows, r_cols].astype(np.float32))
        times.append(t)
    return np.concatenate(times), np.concatenate(goes), np.concatenate(radar)


@dataclass
class Prepared:
    cfg: PipelineConfig
    store: list[GatewayFrames]
    beacons: list[BeaconSeries]
    clear_sky: list[ClearSkyModel]
    boundaries: list[np.ndarray]
    beacon_norm: list[tuple[float, float]]
    stats: dict[str, ChannelStats]
    stats_boundary: int
    staleness_s: int = 600
    extra: dict = field(default_factory=dict)


def training_boundary(times: np.ndarray, train_fraction: float) -> int:
    """Timestamp splitting the time range at ``train_fraction``; used for statistics only."""
    t0, t1 = int(times.min()), int(times.max())
    return t0 + int(train_fraction * (t1 - t0))


def prepare(src: RawSource, run: RunConfig) -> Prepared:
    cfg = run.pipeline
    raw = []
    for g in range(len(src.gateways)):
        raw.append(gateway_aoi_frames(src, g, cfg))
        log.info("gateway %d: %d frames", g, raw[-1][0].size)
    boundary = training_boundary(np.concatenate([r[0] for r in raw]), run.dataset.train_fraction)
    stats = {"goes": ChannelStats.empty(raw[0][1].shape[-1]), "radar": ChannelStats.empty(raw[0][2].shape[-1])}
    for times, goes, radar in raw:
        sel = times < boundary
        stats["goes"] = welford_update(stats["goes"], goes[sel])
        stats["radar"] = welford_update(stats["radar"], radar[sel])
    store = []
    for g in range(len(raw)):
        times, goes, radar = raw[g]
        raw[g] = None  # release the raw copy before the next gateway
        store.append(GatewayFrames(times, standardize_array(goes, stats["goes"]), standardize_array(radar, stats["radar"])))
    beacons, models, bounds, norms = [], [], [], []
    for g in range(len(src.gateways)):
        b = src.beacon(g)
        beacons.append(b)
        models.append(derive_clear_sky_threshold(b, run.labels.bin_minutes, run.labels.halflife_days, run.labels.margin_db))
        hist = b.power_db[b.times < boundary]
        bounds.append(bucketize_beacon(hist, cfg.n_b))
        norms.append((float(hist.mean()), float(hist.std())))
    return Prepared(cfg, store, beacons, models, bounds, norms, stats, boundary, run.dataset.staleness_minutes * 60)


def make_index(prep: Prepared, horizon: int) -> SampleIndex:
    """Labelled instants of all gateways with a complete imagery history, in time order."""
    parts = []
    n_p = prep.cfg.n_p
    for g, beacon in enumerate(prep.beacons):
        lab = label_instants(beacon, prep.clear_sky[g], prep.cfg.label_step_minutes, horizon)
        ft = prep.store[g].times
        newest = np.searchsorted(ft, lab.times, side="right") - 1
        ok = (newest >= n_p - 1) & (lab.times - ft[np.maximum(newest, 0)] <= prep.staleness_s)
        parts.append(
            SampleIndex(
                np.full(int(ok.sum()), g, np.int64),
                lab.times[ok],
                newest[ok].astype(np.int64),
                lab.target_label[ok],
                lab.current_label[ok],
                lab.current_min[ok],
                np.asarray(assign_bucket(lab.current_min[ok], prep.boundaries[g]), np.int64),
            )
        )
    return SampleIndex.concat(parts).sort_by_time()


class LazyData:
    """``BatchSource`` over a SampleIndex; tensors are assembled per batch."""

    def __init__(self, prep: Prepared, index: SampleIndex, mode: str):
        self.prep, self.index, self.mode = prep, index, mode
        self.labels = index.target.astype(np.int64)

    def __len__(self):
        return len(self.index)

    def batch(self, idx):
        return assemble_batch(self.prep.store, self.index.take(idx), self.mode, self.prep.cfg)


def beacon_features(prep: Prepared, index: SampleIndex, n_w: int) -> baselines.BeaconFeatures:
    x = np.empty((len(index), n_w))
    for g, beacon in enumerate(prep.beacons):
        rows = np.flatnonzero(index.gateway_idx == g)
        mean, std = prep.beacon_norm[g]
        x[rows] = baselines.beacon_windows(beacon, index.timestamp[rows], n_w, mean, std)
    return baselines.BeaconFeatures(x, index.target)


# ---------------------------------------------------------------------------
# models


def cnn_input_shape(cfg: PipelineConfig, mode: str) -> tuple:
    return (cfg.n_p, cfg.aoi_pixels, cfg.aoi_pixels, cfg.n_channels(mode))


def build_dl(run: RunConfig, mode: str, seed: int) -> Network:
    layers = default_cnn_layers(run.network.filters, run.network.kernels, run.network.pool)
    return Network(NetworkConfig(cnn_input_shape(run.pipeline, mode), layers, seed, run.network.head_init), np.float32)


def train_config(run: RunConfig, seed: int) -> TrainConfig:
    t = run.train
    return TrainConfig(
        epochs=t.epochs, batch_size=t.batch_size, learning_rate=t.learning_rate, seed=seed,
        max_steps_per_epoch=t.max_steps_per_epoch, lr_decay=t.lr_decay,
    )


@dataclass
class Split:
    horizon: int
    train: SampleIndex
    test: SampleIndex
    train_balanced: SampleIndex


def split_for(prep: Prepared, run: RunConfig, horizon: int) -> Split:
    index = make_index(prep, horizon)
    tr, te = chronological_split(index, run.dataset.train_fraction)
    return Split(horizon, tr, te, rebalance(tr, run.dataset.target_positive_fraction, run.dataset.undersample_period))


def fit_model(prep: Prepared, run: RunConfig, split: Split, name: str, seed: int):
    """Train one named model; returns the fitted object."""
    if name.startswith("dl-"):
        mode = name[3:]
        net = build_dl(run, mode, seed)
        hist = train(net, LazyData(prep, split.train_balanced, mode), train_config(run, seed))
        log.info("%s h=%d loss %s", name, split.horizon, [round(l, 4) for l in hist.loss])
        return net
    b = run.baselines
    feats = beacon_features(prep, split.train_balanced, b.window)
    if name == "mlp":
        return baselines.mlp_train(feats, b.mlp_hidden, b.mlp_epochs, b.mlp_learning_rate, seed=seed,
                                   max_steps_per_epoch=b.mlp_max_steps_per_epoch)
    if name == "svm":
        return baselines.svm_train(feats, b.svm_c, b.svm_epochs, b.svm_learning_rate)
    raise ValueError(f"unknown model {name!r}")


def score_model(prep: Prepared, run: RunConfig, index: SampleIndex, name: str, model) -> np.ndarray:
    """Fade probabilities for every row of ``index``."""
    if name.startswith("dl-"):
        return predict_dataset(model, LazyData(prep, index, name[3:]))
    feats = beacon_features(prep, index, run.baselines.window)
    if name == "mlp":
        return baselines.mlp_predict(model, feats)
    return model.proba(feats.x)


def source_label(name: str) -> str:
    return name[3:] if name.startswith("dl-") else "beacon"


def evaluate(name: str, horizon: int, labels, scores) -> EvalRecord:
    cm = confusion(labels, scores, 0.5)
    try:
        curve = roc_auc(labels, scores)
    except SingleClass:
        curve = None
    return EvalRecord(name, source_label(name), horizon, cm, metrics(cm), curve)


def run_experiment(prep: Prepared, run: RunConfig, horizons: Sequence[int], models: Sequence[str], seed: int = 0):
    """Train and evaluate every (model, horizon); returns (records, {(model, horizon): scores}, splits)."""
    records, scores, splits = [], {}, {}
    for h in horizons:
        split = split_for(prep, run, h)
        splits[h] = split
        for name in models:
            model = fit_model(prep, run, split, name, seed)
            s = score_model(prep, run, split.test, name, model)
            scores[(name, h)] = s
            rec = evaluate(name, h, split.test.target, s)
            records.append(rec)
            log.info("%-8s h=%2d f1=%.3f auc=%s", name, h, rec.metrics.f1, f"{rec.curve.auc:.3f}" if rec.curve else "-")
    return records, scores, splits


# ---------------------------------------------------------------------------
# on-disk raw data and prepared frames

RAW_MANIFEST = "raw.json"
REFL_SCALE = 1e-4  # reflectance stored as uint16 counts of 1e-4
BTEMP_SCALE, BTEMP_OFFSET = 0.01, 150.0  # brightness temperature counts of 0.01 K above 150 K


def grid_meta(g: GeoGrid) -> dict:
    return {
        "crs": g.crs.value, "height": g.height, "width": g.width,
        "origin_x": g.origin_x, "origin_y": g.origin_y, "step_x": g.step_x, "step_y": g.step_y,
    }


def grid_from_meta(d: dict) -> GeoGrid:
    return GeoGrid(np.zeros((d["height"], d["width"])), CRS(d["crs"]), d["origin_x"], d["origin_y"], d["step_x"], d["step_y"])


def _quantize(x, scale, offset=0.0):
    return np.clip(np.rint((x - offset) / scale), 0, 65535).astype(np.uint16)


def write_raw(episode, directory) -> Path:
    """Write an episode as a raw data directory: one npz per gateway-day plus beacon CSVs."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    src = EpisodeSource(episode)
    gateways = []
    for g, gw in enumerate(src.gateways):
        fine, coarse, radar, factor = src.templates(g)
        days = []
        for day, (times, refl, btemp, codes) in enumerate(src.chunks(g)):
            name = f"g{g:02d}-day{day:03d}.npz"
            np.savez(out / name, times=times, refl=_quantize(refl, REFL_SCALE),
                     btemp=_quantize(btemp, BTEMP_SCALE, BTEMP_OFFSET), radar=codes)
            days.append(name)
        write_beacon_csv(out / f"beacon-g{g:02d}.csv", src.beacon(g))
        with open(out / f"truth-g{g:02d}.csv", "w", encoding="utf-8") as fh:
            fh.write("fade_start,fade_end\n")
            for a, b in episode.truth_intervals(g):
                fh.write(f"{format_time(a)},{format_time(b)}\n")
        gateways.append({
            "lat_deg": gw.lat_deg, "lon_deg": gw.lon_deg, "goes_fine": grid_meta(fine), "goes_coarse": grid_meta(coarse),
            "radar_fine": grid_meta(radar), "radar_factor": factor, "chunks": days, "beacon": f"beacon-g{g:02d}.csv",
        })
    doc = {
        "format": "rainfade-raw-1",
        "projection": dataclasses.asdict(episode.proj),
        "refl_scale": REFL_SCALE, "btemp_scale": BTEMP_SCALE, "btemp_offset": BTEMP_OFFSET,
        "scene": episode.params.to_dict(),
        "gateways": gateways,
    }
    (out / RAW_MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return out


class RawDirSource:
    """``RawSource`` reading a directory written by ``write_raw``."""

    def __init__(self, directory):
        self.dir = Path(directory)
        path = self.dir / RAW_MANIFEST
        if not path.exists():
            raise MissingArtifact(f"no raw data at {self.dir} (missing {RAW_MANIFEST}); run `rainfade synth` first")
        try:
            self.doc = json.loads(path.read_text(encoding="utf-8"))
            self.gateways = [LatLon(d["lat_deg"], d["lon_deg"]) for d in self.doc["gateways"]]
            self.proj = FixedGridProjection(**self.doc["projection"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed raw manifest ({exc})") from None

    def templates(self, g):
        d = self.doc["gateways"][g]
        return grid_from_meta(d["goes_fine"]), grid_from_meta(d["goes_coarse"]), grid_from_meta(d["radar_fine"]), int(d["radar_factor"])

    def chunks(self, g):
        doc = self.doc
        for name in doc["gateways"][g]["chunks"]:
            path = self.dir / name
            if not path.exists():
                raise MissingArtifact(f"raw chunk {path} is missing")
            with np.load(path) as z:
                refl = z["refl"].astype(np.float32) * np.float32(doc["refl_scale"])
                btemp = z["btemp"].astype(np.float32) * np.float32(doc["btemp_scale"]) + np.float32(doc["btemp_offset"])
                yield z["times"], refl, btemp, z["radar"]

    def beacon(self, g):
        path = self.dir / self.doc["gateways"][g]["beacon"]
        if not path.exists():
            raise MissingArtifact(f"beacon file {path} is missing")
        return read_beacon_csv(path, g)


PREPARED_META = "prepared.json"


def save_prepared(prep: Prepared, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for g, fr in enumerate(prep.store):
        np.savez(out / f"frames-g{g:02d}.npz", times=fr.times, goes=fr.goes, radar=fr.radar)
        write_beacon_csv(out / f"beacon-g{g:02d}.csv", prep.beacons[g])
    doc = {
        "pipeline": dataclasses.asdict(prep.cfg),
        "n_gateways": len(prep.store),
        "stats": {k: v.to_dict() for k, v in prep.stats.items()},
        "stats_boundary": prep.stats_boundary,
        "staleness_s": prep.staleness_s,
        "clear_sky": [m.to_dict() for m in prep.clear_sky],
        "bucket_boundaries": [b.tolist() for b in prep.boundaries],
        "beacon_norm": [list(n) for n in prep.beacon_norm],
    }
    (out / PREPARED_META).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")


def load_prepared(directory) -> Prepared:
    src = Path(directory)
    path = src / PREPARED_META
    if not path.exists():
        raise MissingArtifact(f"no prepared data at {src}; run `rainfade preprocess` first")
    doc = json.loads(path.read_text(encoding="utf-8"))
    store, beacons = [], []
    for g in range(doc["n_gateways"]):
        fpath = src / f"frames-g{g:02d}.npz"
        if not fpath.exists():
            raise MissingArtifact(f"frame store {fpath} is missing")
        with np.load(fpath) as z:
            store.append(GatewayFrames(z["times"], z["goes"], z["radar"]))
        beacons.append(read_beacon_csv(src / f"beacon-g{g:02d}.csv", g))
    return Prepared(
        PipelineConfig(**doc["pipeline"]),
        store,
        beacons,
        [ClearSkyModel.from_dict(d) for d in doc["clear_sky"]],
        [np.asarray(b) for b in doc["bucket_boundaries"]],
        [tuple(n) for n in doc["beacon_norm"]],
        {k: ChannelStats.from_dict(v) for k, v in doc["stats"].items()},
        int(doc["stats_boundary"]),
        int(doc["staleness_s"]),
    )
