"""Confusion matrices, per-class IoU, MIoU and report rendering.

IoU is computed from one pooled confusion matrix.  MIoU averages over all
``n`` classes; a class absent from both prediction and ground truth has IoU 0
and still counts in the divisor.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .schema import LULC_SCHEMA, N_CLASSES

REPORT_COLUMNS = ["Unknown", "Urban", "Agriculture", "Rangeland", "Forest", "Water", "Barren", "MIoU"]


class ConfusionMatrix:
    """Rows are ground-truth classes, columns predicted classes."""

    def __init__(self, n_classes: int = N_CLASSES, counts: np.ndarray | None = None):
        self.n_classes = n_classes
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (n_classes, n_classes) or (self.counts < 0).any():
            raise ValueError("counts must be a non-negative n x n integer grid")

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        """Return a new matrix with ``(pred, gt)`` added; ``self`` is unchanged."""
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        for name, a in (("prediction", pred), ("ground truth", gt)):
            if a.size and (a.min() < 0 or a.max() >= self.n_classes):
                raise ValueError(f"{name} codes must lie in 0..{self.n_classes - 1}")
        idx = self.n_classes * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
        inc = np.bincount(idx, minlength=self.n_classes ** 2).reshape(self.n_classes, self.n_classes)
        return ConfusionMatrix(self.n_classes, self.counts + inc)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def argmax_predict(logits) -> np.ndarray:
    """Per-pixel argmax over the trailing class axis; ties go to the lowest code."""
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    return logits.argmax(axis=-1).astype(np.uint8)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    union = tp + fp + fn
    return np.divide(tp, union, out=np.zeros(cm.n_classes), where=union > 0)


def miou(cm: ConfusionMatrix) -> float:
    return float(iou_per_class(cm).sum() / cm.n_classes)


@dataclass
class EvalReport:
    per_class_iou: list[float]  # percentages
    miou: float  # percentage
    pixel_counts: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, **metadata) -> "EvalReport":
        iou = iou_per_class(cm)
        return cls([float(100 * v) for v in iou], float(100 * iou.sum() / cm.n_classes),
                   [int(v) for v in cm.counts.sum(axis=1)], metadata)

    @classmethod
    def from_per_class(cls, per_class_iou, **metadata) -> "EvalReport":
        values = [float(v) for v in per_class_iou]
        return cls(values, sum(values) / len(values), [], metadata)

    @property
    def name(self) -> str:
        return str(self.metadata.get("name", "run"))

    def row(self) -> list[float]:
        return [*self.per_class_iou, self.miou]

    def to_dict(self) -> dict:
        return {"per_class_iou": dict(zip(LULC_SCHEMA.names, self.per_class_iou)), "miou": self.miou,
                "pixel_counts": self.pixel_counts, "metadata": self.metadata}


def render_report(reports: list[EvalReport], format: str = "table") -> str:
    """Render reports as a fixed-width table, CSV or JSON, two-decimal percentages."""
    if not reports:
        raise ValueError("no reports to render")
    rows = [(r.name, [f"{v:.2f}" for v in r.row()]) for r in reports]
    if format == "table":
        width = max(12, *(len(n) for n, _ in rows))
        lines = [f"{'Network':<{width}}" + "".join(f"{c:>13}" for c in REPORT_COLUMNS)]
        lines += [f"{n:<{width}}" + "".join(f"{v:>13}" for v in vals) for n, vals in rows]
        return "\n".join(lines)
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Network", *REPORT_COLUMNS])
        for n, vals in rows:
            w.writerow([n, *vals])
        return buf.getvalue()
    if format == "json":
        return json.dumps([{"Network": n, **{c: float(v) for c, v in zip(REPORT_COLUMNS, vals)}}
                           for n, vals in rows], indent=1)
    raise ValueError(f"unknown format {format!r}")
