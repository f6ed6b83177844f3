"""Command-line entry point: ``rainfade <command> --config run.toml``.

Artifacts live under the run directory (``out_dir`` in the config, or --out):

    raw/        synthetic raw imagery (npz per gateway-day) and beacon CSVs
    prepared/   standardised AoI frame store, beacon copies, statistics
    labels/     labelled instants per horizon and gateway
    dataset/    RFS1 sample export (manifest.json + shards)
    models/     one RFM1 checkpoint per model and horizon
    reports/    metrics.csv, roc.csv, confusion.csv and comparison tables
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, baselines, pipeline
from .config import RunConfig, load_config
from .dataset import DatasetManifest, chronological_split, materialize, read_dataset, write_dataset
from .errors import ConfigError, ConfigParse, DataError, MissingArtifact, RainFadeError
from .evaluation import emit_report, read_csv_rows
from .labeling import label_instants, write_labels_csv
from .model import load_checkpoint, load_network, save_network
from .synth import gen_episode

log = logging.getLogger("rainfade")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
EXIT_CONFIG, EXIT_DATA = 2, 3


class Context:
    def __init__(self, run: RunConfig, out: Path, jobs: int, deterministic: bool):
        self.run, self.out, self.jobs, self.deterministic = run, out, jobs, deterministic

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def checkpoint(self, model: str, horizon: int) -> Path:
        return self.path("models", f"{model}-h{horizon}.rfm")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(ctx: Context) -> int:
    run = ctx.run
    ep = gen_episode(run.scene, run.gateways, run.projection, max(run.horizons), run.pipeline.n_p)
    out = pipeline.write_raw(ep, ctx.path("raw"))
    print(f"wrote raw data for {len(run.gateways)} gateways to {out}")
    return 0


def cmd_preprocess(ctx: Context) -> int:
    run = ctx.run
    prep = pipeline.prepare(pipeline.RawDirSource(ctx.path("raw")), run)
    pipeline.save_prepared(prep, ctx.path("prepared"))
    labels_dir = ctx.path("labels")
    labels_dir.mkdir(parents=True, exist_ok=True)
    for h in run.horizons:
        for g, beacon in enumerate(prep.beacons):
            lab = label_instants(beacon, prep.clear_sky[g], run.pipeline.label_step_minutes, h)
            write_labels_csv(labels_dir / f"labels-h{h}-g{g:02d}.csv", lab)
    # export a capped slice of the first horizon's test split as RFS1 samples
    h = run.horizons[0]
    index = pipeline.make_index(prep, h)
    _, test = chronological_split(index, run.dataset.train_fraction)
    export = test.take(np.arange(min(len(test), run.dataset.export_max_samples)))
    cfg = run.pipeline_for(h)
    manifest = DatasetManifest(
        dataclasses.asdict(cfg), 0, {}, int(test.timestamp[0]) if len(test) else None,
        extra={"source_mode": run.source_mode, "split": "test", "total_test_samples": len(test)},
    )
    manifest = write_dataset(materialize(prep.store, export, run.source_mode, cfg), manifest, ctx.path("dataset"))
    print(f"prepared {len(prep.store)} gateways; exported {manifest.sample_count} samples to {ctx.path('dataset')}")
    return 0


def _load_prepared(ctx: Context) -> pipeline.Prepared:
    prep = pipeline.load_prepared(ctx.path("prepared"))
    if prep.cfg.n_g != ctx.run.pipeline.n_g or prep.cfg.aoi_pixels != ctx.run.pipeline.aoi_pixels:
        raise DataError("prepared data does not match the config; re-run `rainfade preprocess`")
    return prep


def save_model(path: Path, name: str, horizon: int, model) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = {"model": name, "horizon_minutes": horizon}
    if name == "svm":
        baselines.save_svm(path, model)
    else:
        save_network(model, path, "cnn3d" if name.startswith("dl-") else "mlp", extra)


def load_model(path: Path, name: str):
    if name == "svm":
        desc, params = load_checkpoint(path)
        return baselines.load_svm(desc, params)
    net, _ = load_network(path)
    return net


def cmd_train(ctx: Context) -> int:
    run = ctx.run
    prep = _load_prepared(ctx)
    for h in run.horizons:
        split = pipeline.split_for(prep, run, h)
        log.info("h=%d: %d train (%d after rebalance), %d test", h, len(split.train), len(split.train_balanced), len(split.test))
        for name in run.models:
            model = pipeline.fit_model(prep, run, split, name, run.train.seed)
            save_model(ctx.checkpoint(name, h), name, h, model)
            print(f"trained {name} h={h} -> {ctx.checkpoint(name, h)}")
    return 0


def cmd_eval(ctx: Context) -> int:
    run = ctx.run
    prep = _load_prepared(ctx)
    records = []
    for h in run.horizons:
        split = pipeline.split_for(prep, run, h)
        for name in run.models:
            model = load_model(ctx.checkpoint(name, h), name)
            scores = pipeline.score_model(prep, run, split.test, name, model)
            records.append(pipeline.evaluate(name, h, split.test.target, scores))
    paths = emit_report(records, ctx.path("reports"))
    for r in records:
        print(f"{r.model:8s} h={r.horizon:2d} f1={r.metrics.f1:.3f} auc={r.curve.auc if r.curve else float('nan'):.3f}")
    print(f"reports written to {paths['metrics'].parent}")
    return 0


def cmd_predict(ctx: Context, args) -> int:
    run = ctx.run
    name = args.model or f"dl-{run.source_mode}"
    if not name.startswith("dl-"):
        raise ConfigParse("predict scores stored imagery samples; choose a dl-* model")
    h = args.horizon or run.horizons[0]
    samples = read_dataset(Path(args.sample) if args.sample else ctx.path("dataset"))
    if not 0 <= args.index < len(samples):
        raise DataError(f"sample index {args.index} out of range (dataset holds {len(samples)})")
    net, _ = load_network(ctx.checkpoint(name, h))
    x = samples[args.index].tensor
    if x.shape != tuple(net.config.input_shape):
        raise DataError(f"sample shape {x.shape} does not fit model input {tuple(net.config.input_shape)}")
    p = float(net.predict_proba(x[None])[0])
    print(f"{p:.6f}")
    return 0


def cmd_report(ctx: Context) -> int:
    src = ctx.path("reports", "metrics.csv")
    if not src.exists():
        raise MissingArtifact(f"{src} not found; run `rainfade eval` first")
    rows = read_csv_rows(src)
    models = list(dict.fromkeys(r["model"] for r in rows))
    horizons = sorted({int(r["horizon_minutes"]) for r in rows})
    table = {(r["model"], int(r["horizon_minutes"])): r for r in rows}
    out = ctx.path("reports")
    lines = []
    for metric in ("f1", "auc", "precision", "recall", "accuracy"):
        with open(out / f"comparison-{metric}.csv", "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# {metric} on the test split; one row per horizon (minutes), one column per model\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["horizon_minutes", *models])
            for h in horizons:
                w.writerow([h, *(table[(m, h)][metric] if (m, h) in table else "" for m in models)])
        if metric == "f1":
            lines.append("| horizon | " + " | ".join(models) + " |")
            lines.append("|---" * (len(models) + 1) + "|")
            for h in horizons:
                cells = (f"{float(table[(m, h)]['f1']):.3f}" if (m, h) in table else "" for m in models)
                lines.append(f"| {h} | " + " | ".join(cells) + " |")
    text = "# Test F1 by horizon\n\n" + "\n".join(lines) + "\n"
    (out / "summary.md").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rainfade", description="Rain fade forecasting from imagery and beacon data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "generate a synthetic raw data directory"),
        ("preprocess", "build the frame store, labels and a sample export"),
        ("train", "train every configured model for every horizon"),
        ("eval", "score the test split and write CSV reports"),
        ("predict", "print the fade probability of one stored sample"),
        ("report", "merge metrics into comparison tables"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--jobs", type=int, default=1, help="worker cap (commands run single-process)")
        p.add_argument("--deterministic", action="store_true", help="force the deterministic contract")
        p.add_argument("--out", help="run directory; overrides out_dir from the config")
        if name == "predict":
            p.add_argument("--sample", help="dataset directory (default: <out>/dataset)")
            p.add_argument("--index", type=int, default=0, help="sample index within the dataset")
            p.add_argument("--model", help="dl-goes, dl-radar or dl-both (default: dl-<source_mode>)")
            p.add_argument("--horizon", type=int, help="horizon in minutes (default: first configured)")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("RAINFADE_LOG", "warn").lower()
    if level not in LOG_LEVELS:
        raise ConfigParse(f"RAINFADE_LOG must be one of {sorted(LOG_LEVELS)}, not {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.jobs < 1:
            raise ConfigParse("--jobs must be at least 1")
        run = load_config(args.config)
        out = Path(args.out) if args.out else Path(run.out_dir)
        if args.deterministic:
            log.info("deterministic mode")
        ctx = Context(run, out, args.jobs, args.deterministic)
        commands = {
            "synth": cmd_synth,
            "preprocess": cmd_preprocess,
            "train": cmd_train,
            "eval": cmd_eval,
            "report": cmd_report,
        }
        if args.command == "predict":
            return cmd_predict(ctx, args)
        return commands[args.command](ctx)
    except ConfigError as exc:
        print(f"rainfade: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, RainFadeError) as exc:
        print(f"rainfade: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"rainfade: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
