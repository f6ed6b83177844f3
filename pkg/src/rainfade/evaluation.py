"""Confusion matrices, classification metrics, ROC/AUC and CSV reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyMatrix, LengthMismatch, SingleClass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(labels, scores, threshold: float = 0.5) -> ConfusionMatrix:
    """Tally predictions; a score equal to the threshold counts as positive."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, np.float64)
    if y.shape != s.shape:
        raise LengthMismatch(f"{y.size} labels vs {s.size} scores")
    if y.size == 0:
        raise LengthMismatch("need at least one prediction")
    pred = s >= threshold
    return ConfusionMatrix(
        int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & ~y)), int(np.sum(~pred & y))
    )


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fade_ratio: float
    degenerate: frozenset = frozenset()

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "fade_ratio": self.fade_ratio,
        }


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy, precision, recall, F1 and (TP+TN)/(FP+FN).

    A zero denominator yields 0 for that metric (infinity for ``fade_ratio``)
    and its name is listed in ``degenerate``.
    """
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    bad = set()

    def ratio(name, num, den):
        if den == 0:
            bad.add(name)
            return 0.0
        return num / den

    accuracy = (cm.tp + cm.tn) / cm.total
    precision = ratio("precision", cm.tp, cm.tp + cm.fp)
    recall = ratio("recall", cm.tp, cm.tp + cm.fn)
    f1 = ratio("f1", 2 * precision * recall, precision + recall)
    if cm.fn + cm.fp == 0:
        bad.add("fade_ratio")
        fade_ratio = math.inf
    else:
        fade_ratio = (cm.tp + cm.tn) / (cm.fn + cm.fp)
    return Metrics(accuracy, precision, recall, f1, fade_ratio, frozenset(bad))


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; the first entry is +inf
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


def roc_auc(labels, scores) -> RocCurve:
    """ROC over every distinct score; tied scores move TPR and FPR together."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, np.float64)
    if y.shape != s.shape:
        raise LengthMismatch(f"{y.size} labels vs {s.size} scores")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_group]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, tpr, fpr, auc)


def permutation_null_auc(labels, scores, n_perm: int = 20, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    y = np.asarray(labels).astype(bool)
    return np.array([roc_auc(rng.permutation(y), scores).auc for _ in range(n_perm)])


# ---------------------------------------------------------------------------
# reports

METRIC_COLUMNS = ["model", "source", "horizon_minutes", "accuracy", "precision", "recall", "f1", "fade_ratio", "auc", "tp", "fp", "tn", "fn", "degenerate"]


@dataclass
class EvalRecord:
    model: str
    source: str
    horizon: int
    cm: ConfusionMatrix
    metrics: Metrics
    curve: RocCurve | None


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def _write(path: Path, header_comment: Sequence[str], columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in header_comment:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow(r)


def emit_report(records: Sequence[EvalRecord], out_dir) -> dict[str, Path]:
    """Write metrics.csv, roc.csv and confusion.csv; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {n: out / f"{n}.csv" for n in ("metrics", "roc", "confusion")}
    _write(
        paths["metrics"],
        [
            "one row per model x input source x forecast horizon, evaluated on the chronological test split",
            "columns: model, source (goes|radar|both|beacon), horizon_minutes, accuracy, precision, recall, f1,",
            "fade_ratio=(TP+TN)/(FP+FN), auc, tp, fp, tn, fn, degenerate (';'-joined metrics with a zero denominator)",
        ],
        METRIC_COLUMNS,
        (
            [
                r.model,
                r.source,
                r.horizon,
                *(_fmt(v) for v in r.metrics.as_dict().values()),
                _fmt(r.curve.auc) if r.curve else "nan",
                r.cm.tp,
                r.cm.fp,
                r.cm.tn,
                r.cm.fn,
                ";".join(sorted(r.metrics.degenerate)),
            ]
            for r in records
        ),
    )
    _write(
        paths["roc"],
        ["ROC points per model/source/horizon, ordered by descending threshold (FPR and TPR non-decreasing)",
         "columns: model, source, horizon_minutes, threshold, tpr, fpr"],
        ["model", "source", "horizon_minutes", "threshold", "tpr", "fpr"],
        (
            [r.model, r.source, r.horizon, _fmt(t), _fmt(tp), _fmt(fp)]
            for r in records
            if r.curve is not None
            for t, tp, fp in zip(r.curve.thresholds, r.curve.tpr, r.curve.fpr)
        ),
    )
    _write(
        paths["confusion"],
        ["confusion counts at the 0.5 decision threshold (score >= threshold is a predicted fade)",
         "columns: model, source, horizon_minutes, tp, fp, tn, fn"],
        ["model", "source", "horizon_minutes", "tp", "fp", "tn", "fn"],
        ([r.model, r.source, r.horizon, r.cm.tp, r.cm.fp, r.cm.tn, r.cm.fn] for r in records),
    )
    return paths


def read_csv_rows(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))
