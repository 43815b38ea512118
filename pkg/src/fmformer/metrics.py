"""Classification and dense-prediction metrics (abnormal = positive class)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_predictions(cls, pred, truth) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        truth = np.asarray(truth).astype(bool)
        return cls(int(np.sum(pred & truth)), int(np.sum(pred & ~truth)),
                   int(np.sum(~pred & ~truth)), int(np.sum(~pred & truth)))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        log.warning("%s undefined (empty denominator); reporting 0", what)
        return 0.0
    return num / den


def classify_metrics(c: ConfusionCounts) -> tuple[float, float, float, float]:
    """(accuracy, F1, false detection rate, miss detection rate)."""
    acc = _ratio(c.tp + c.tn, c.total, "accuracy")
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "F1")
    fdr = _ratio(c.fp, c.fp + c.tn, "FDR")
    mdr = _ratio(c.fn, c.fn + c.tp, "MDR")
    return acc, f1, fdr, mdr


@dataclass
class IoUAccumulator:
    """Dataset-level intersection/union per class."""

    num_classes: int = 2
    inter: np.ndarray = field(default=None)
    union: np.ndarray = field(default=None)
    present: np.ndarray = field(default=None)

    def __post_init__(self):
        k = self.num_classes
        self.inter = np.zeros(k, dtype=np.int64)
        self.union = np.zeros(k, dtype=np.int64)
        self.present = np.zeros(k, dtype=bool)

    def update(self, pred, truth) -> None:
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise ValueError(f"mask extents differ: {pred.shape} vs {truth.shape}")
        for k in range(self.num_classes):
            p, t = pred == k, truth == k
            self.inter[k] += int(np.sum(p & t))
            self.union[k] += int(np.sum(p | t))
            self.present[k] |= bool(p.any() or t.any())

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        out = IoUAccumulator(self.num_classes)
        out.inter = self.inter + other.inter
        out.union = self.union + other.union
        out.present = self.present | other.present
        return out

    def per_class(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.inter / np.maximum(self.union, 1), np.nan)

    def value(self) -> float:
        ious = self.per_class()[self.present]
        return float(ious.mean()) if ious.size else 0.0


def miou(pred_masks, true_masks, num_classes: int = 2) -> float:
    """Mean IoU with intersections/unions accumulated over the whole set.

    Classes absent from both predictions and truth across the set are left out
    of the mean.
    """
    acc = IoUAccumulator(num_classes)
    acc.update(pred_masks, true_masks)
    return acc.value()


@dataclass
class MetricsRecord:
    acc: float = float("nan")
    f1: float = float("nan")
    fdr: float = float("nan")
    mdr: float = float("nan")
    miou: float = float("nan")
    counts: ConfusionCounts | None = None

    def as_dict(self) -> dict[str, float]:
        return {"acc": self.acc, "f1": self.f1, "fdr": self.fdr, "mdr": self.mdr, "miou": self.miou}


def summarize(cls_pred, cls_true, pix_pred=None, pix_true=None, num_classes: int = 2) -> MetricsRecord:
    rec = MetricsRecord()
    if cls_pred is not None:
        counts = ConfusionCounts.from_predictions(cls_pred, cls_true)
        rec.acc, rec.f1, rec.fdr, rec.mdr = classify_metrics(counts)
        rec.counts = counts
    if pix_pred is not None:
        rec.miou = miou(pix_pred, pix_true, num_classes)
    return rec


def format_table(rows: list[tuple[str, MetricsRecord]]) -> str:
    head = f"{'run':<24}{'Acc':>8}{'F1':>8}{'FDR':>8}{'MDR':>8}{'mIoU':>8}"
    lines = [head, "-" * len(head)]
    for name, r in rows:
        lines.append(f"{name:<24}{r.acc:>8.4f}{r.f1:>8.4f}{r.fdr:>8.4f}{r.mdr:>8.4f}{r.miou:>8.4f}")
    return "\n".join(lines)
