"""Task-aware scoring of one prediction against its target image."""
from __future__ import annotations

import numpy as np

from ..imagecore import DEFAULT_PALETTE, DEFAULT_TOL, Palette, parse_color_mask, to_rgb
from .detection import detection_metrics, mean_average_precision, parse_boxes
from .features import perceptual_distance
from .fidelity import psnr, ssim
from .segmentation import segmentation_metrics

BOX_COLOR = (0.0, 1.0, 0.0)
MASK_METRICS = ("dice", "miou", "accuracy", "precision", "sensitivity", "specificity")
BOX_METRICS = ("precision", "recall", "f1", "miou", "map")
IMAGE_METRICS = ("psnr", "ssim", "lpips")


def score(target_kind: str, pred, target, palette: Palette = DEFAULT_PALETTE, tol: float = DEFAULT_TOL) -> dict[str, float]:
    pred, target = to_rgb(pred), to_rgb(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    if target_kind == "mask":
        p = parse_color_mask(pred, palette, tol)
        g = parse_color_mask(target, palette, tol)
        classes = sorted(set(np.unique(g).tolist()) - {0}) or None
        return segmentation_metrics(p, g, classes)
    if target_kind == "boxes":
        pb = parse_boxes(pred, BOX_COLOR, tol)
        gb = parse_boxes(target, BOX_COLOR, tol)
        d = detection_metrics(pb, gb, 0.5)
        return {"precision": d["precision"], "recall": d["recall"], "f1": d["f1"], "miou": d["miou"],
                "map": mean_average_precision(pb, gb)}
    if target_kind == "image":
        out = {"psnr": psnr(pred, target), "lpips": perceptual_distance(pred, target)}
        out["ssim"] = ssim(pred, target) if min(pred.shape[:2]) >= 11 else float("nan")
        return out
    raise ValueError(f"unknown target kind {target_kind!r}")
