"""Confusion matrices, accuracy, macro precision/recall/F1 and their CSV reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from twospeed.fileio import atomic_write_text


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    class_names: tuple[str, ...]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(true, pred, n_classes: int, class_names=None) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape or true.ndim != 1:
        raise ValueError(f"label arrays differ in shape: {true.shape} vs {pred.shape}")
    for arr in (true, pred):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts, names)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("overall accuracy is undefined for an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def precision_recall_f1(cm: ConfusionMatrix) -> dict[str, np.ndarray | float]:
    """Per-class and macro precision, recall and F1; a zero denominator yields 0."""
    if cm.total == 0:
        raise UndefinedMetricError("metrics are undefined for an empty confusion matrix")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    precision = _safe_div(tp, c.sum(axis=0))
    recall = _safe_div(tp, c.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
    }


@dataclass
class MetricsReport:
    model: str
    increment: str
    n_eval: int
    oa: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: dict[str, np.ndarray] = field(default_factory=dict)
    train_fraction_fast: float | None = None
    train_fraction_slow: float | None = None
    training_total_seconds: float = 0.0

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, model: str, increment: str = "", **kw) -> "MetricsReport":
        m = precision_recall_f1(cm)
        return cls(
            model=model,
            increment=increment,
            n_eval=cm.total,
            oa=overall_accuracy(cm),
            macro_precision=m["macro_precision"],
            macro_recall=m["macro_recall"],
            macro_f1=m["macro_f1"],
            per_class={k: m[k] for k in ("precision", "recall", "f1")},
            **kw,
        )


METRICS_COLUMNS = (
    "model",
    "increment",
    "train_fraction_fast",
    "train_fraction_slow",
    "n_eval",
    "oa",
    "macro_precision",
    "macro_recall",
    "macro_f1",
    "training_total_seconds",
)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6f}"
    return str(x)


def metrics_row(r: MetricsReport) -> str:
    vals = [getattr(r, c) for c in METRICS_COLUMNS]
    return ",".join(_fmt(v) for v in vals)


def metrics_csv(reports) -> str:
    return ",".join(METRICS_COLUMNS) + "\n" + "".join(metrics_row(r) + "\n" for r in reports)


def confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *cm.class_names])
    for name, row in zip(cm.class_names, cm.counts):
        w.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def parse_confusion_csv(text: str) -> ConfusionMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    names = tuple(rows[0][1:])
    counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64).reshape(len(names), len(names))
    return ConfusionMatrix(counts, names)


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)


def emit_report(reports, confusions: dict[str, ConfusionMatrix], out_dir) -> list[Path]:
    """Write ``metrics.csv`` plus one ``confusion_<id>.csv`` per entry of ``confusions``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(reports, MetricsReport):
        reports = [reports]
    written = [out / "metrics.csv"]
    atomic_write_text(written[0], metrics_csv(reports))
    for ident, cm in confusions.items():
        p = out / f"confusion_{_slug(ident)}.csv"
        atomic_write_text(p, confusion_csv(cm))
        written.append(p)
    return written
