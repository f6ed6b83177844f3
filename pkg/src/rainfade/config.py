"""Run configuration: one TOML document with nested sections.

Unknown sections or keys are rejected so typos fail loudly. See docs/config.md.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigParse, NonDivisible, ShapeMismatch
from .geo import GOES_EAST, FixedGridProjection, LatLon
from .model import Network, NetworkConfig, default_cnn_layers
from .preprocess import PipelineConfig
from .synth import DEFAULT_GATEWAYS, SceneParams

MODEL_NAMES = ("dl-goes", "dl-radar", "dl-both", "mlp", "svm")


@dataclass
class LabelConfig:
    bin_minutes: int = 30
    halflife_days: float = 7.0
    margin_db: float = 3.0


@dataclass
class NetworkSection:
    filters: tuple = (16, 32)
    kernels: tuple = ((3, 3, 3), (3, 4, 4))
    pool: tuple = (1, 2, 2)
    head_init: str = "zeros"


@dataclass
class TrainSection:
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_steps_per_epoch: int | None = None
    lr_decay: float = 1.0
    seed: int = 0


@dataclass
class BaselineSection:
    window: int = 30
    mlp_hidden: tuple = (32,)
    mlp_epochs: int = 20
    mlp_learning_rate: float = 1e-3
    mlp_max_steps_per_epoch: int | None = None
    svm_c: float = 1.0
    svm_epochs: int = 300
    svm_learning_rate: float = 0.5


@dataclass
class DatasetSection:
    train_fraction: float = 0.8
    target_positive_fraction: float = 0.5
    undersample_period: int | None = None  # None picks one automatically
    staleness_minutes: int = 10
    export_max_samples: int = 256


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    scene: SceneParams = field(default_factory=SceneParams)
    labels: LabelConfig = field(default_factory=LabelConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    projection: FixedGridProjection = GOES_EAST
    gateways: list = field(default_factory=lambda: list(DEFAULT_GATEWAYS))
    horizons: list = field(default_factory=lambda: [5, 15, 25, 35, 45, 55, 65])
    source_mode: str = "both"
    models: list = field(default_factory=lambda: list(MODEL_NAMES))
    out_dir: str = "run"

    def validate(self) -> None:
        if not self.horizons:
            raise ConfigParse("horizons must be non-empty")
        if self.source_mode not in ("goes", "radar", "both"):
            raise ConfigParse(f"source_mode must be goes, radar or both, not {self.source_mode!r}")
        bad = [m for m in self.models if m not in MODEL_NAMES]
        if bad:
            raise ConfigParse(f"unknown models {bad}; choose from {MODEL_NAMES}")
        if len(self.gateways) != self.pipeline.n_g:
            raise ConfigParse(f"pipeline.n_g = {self.pipeline.n_g} but {len(self.gateways)} gateways are listed")
        for h in self.horizons:
            if h < 5 or h % self.pipeline.label_step_minutes:
                raise ConfigParse(f"horizon {h} must be >= 5 and a multiple of the label step")
        if self.scene.goes_fine_factor < 1 or self.pipeline.aoi_pixels > self.scene.tile_pixels:
            raise ConfigParse("scene.tile_pixels must be at least pipeline.aoi_pixels")
        p = self.pipeline
        layers = default_cnn_layers(self.network.filters, self.network.kernels, self.network.pool)
        try:
            Network(NetworkConfig((p.n_p, p.aoi_pixels, p.aoi_pixels, p.n_channels("both")), layers), init=False)
        except (ShapeMismatch, NonDivisible) as exc:
            raise ConfigParse(f"[network] does not fit the input stack: {exc}") from None

    def pipeline_for(self, horizon: int) -> PipelineConfig:
        return dataclasses.replace(self.pipeline, horizon_minutes=horizon)


_SECTIONS = {
    "pipeline": PipelineConfig,
    "scene": SceneParams,
    "labels": LabelConfig,
    "network": NetworkSection,
    "train": TrainSection,
    "baselines": BaselineSection,
    "dataset": DatasetSection,
    "projection": FixedGridProjection,
}
_TOP = {"horizons", "source_mode", "models", "out_dir", "gateways"}


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, section: str, values: dict):
    names = {f.name for f in dataclasses.fields(cls)} - {"blobs"}
    unknown = set(values) - names
    if unknown:
        raise ConfigParse(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigParse(f"[{section}]: {exc}") from None


def parse_config(doc: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigParse(f"[{key}] must be a table")
            default = getattr(cfg, key)
            merged = {**dataclasses.asdict(default), **value} if key != "scene" else {**default.to_dict(), **value}
            kwargs[key] = _build(_SECTIONS[key], key, merged)
        elif key in _TOP:
            kwargs[key] = value
        else:
            raise ConfigParse(f"unknown config key {key!r}")
    if "gateways" in kwargs:
        try:
            kwargs["gateways"] = [LatLon(float(g[0]), float(g[1])) for g in kwargs["gateways"]]
        except (TypeError, ValueError, IndexError) as exc:
            raise ConfigParse(f"gateways must be [[lat, lon], ...]: {exc}") from None
    if "horizons" in kwargs:
        kwargs["horizons"] = [int(h) for h in kwargs["horizons"]]
    out = dataclasses.replace(cfg, **kwargs)
    out.validate()
    return out


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigParse(f"cannot read {path}: {exc}") from None
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigParse(f"{path}: {exc}") from None
    return parse_config(doc)
