"""Pixel-level segmentation scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..imagecore import as_mask


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, gt, class_id: int) -> ConfusionCounts:
    p = as_mask(pred) == class_id
    g = as_mask(gt) == class_id
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def class_scores(c: ConfusionCounts) -> dict[str, float]:
    """Scores for one class; undefined ratios use the agree-on-nothing convention."""
    nothing = c.tp + c.fp + c.fn == 0
    return {
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, 1.0),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, 1.0),
        "accuracy": _ratio(c.tp + c.tn, c.total, 1.0),
        "precision": _ratio(c.tp, c.tp + c.fp, 1.0 if nothing else 0.0),
        "sensitivity": _ratio(c.tp, c.tp + c.fn, 1.0 if c.fp == 0 else 0.0),
        "specificity": _ratio(c.tn, c.tn + c.fp, 1.0),
    }


def segmentation_metrics(pred, gt, classes=None) -> dict[str, float]:
    """Mean of per-class (one-vs-rest) scores over ``classes``.

    ``classes`` defaults to the nonzero labels present in either mask, or
    ``[1]`` when both are empty. Returns dice, miou, accuracy, precision,
    sensitivity and specificity.
    """
    pred, gt = as_mask(pred), as_mask(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if classes is None:
        classes = sorted((set(np.unique(pred).tolist()) | set(np.unique(gt).tolist())) - {0}) or [1]
    per = [class_scores(confusion(pred, gt, int(c))) for c in classes]
    out = {k: float(np.mean([s[k] for s in per])) for k in per[0]}
    out["miou"] = out.pop("iou")
    return out
