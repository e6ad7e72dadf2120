"""Box IoU, greedy matching, mAP and box extraction from rendered images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..imagecore import ImageError, as_image

MAP_THRESHOLDS = tuple(t / 100 for t in range(50, 100, 5))


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def greedy_match(preds, gts, iou_thr: float) -> list[tuple[int, int, float]]:
    """Match predictions to ground truth in confidence order.

    Equal confidences are processed best-IoU first. Each prediction takes the
    unmatched ground-truth box with the highest IoU >= ``iou_thr`` (lowest
    index on ties). Returns ``(pred_idx, gt_idx, iou)`` triples.
    """
    preds, gts = list(preds), list(gts)
    ious = np.array([[box_iou(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))
    best = ious.max(axis=1) if gts else np.zeros(len(preds))
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, -best[i], i))
    taken = set()
    matches = []
    for i in order:
        j_best, v_best = -1, -1.0
        for j in range(len(gts)):
            if j not in taken and ious[i, j] >= iou_thr and ious[i, j] > v_best:
                j_best, v_best = j, ious[i, j]
        if j_best >= 0:
            taken.add(j_best)
            matches.append((i, j_best, float(v_best)))
    return matches


def detection_metrics(preds, gts, iou_thr: float = 0.5) -> dict:
    if not 0 < iou_thr < 1:
        raise ValueError("iou_thr must lie in (0, 1)")
    preds, gts = list(preds), list(gts)
    matches = greedy_match(preds, gts, iou_thr)
    tp = len(matches)
    p = tp / len(preds) if preds else (1.0 if not gts else 0.0)
    r = tp / len(gts) if gts else (1.0 if not preds else 0.0)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    miou = float(np.mean([m[2] for m in matches])) if matches else (1.0 if not preds and not gts else 0.0)
    return {"precision": p, "recall": r, "f1": f1, "miou": miou, "matches": matches}


def _as_sets(preds, gts):
    if preds and isinstance(preds[0], Box) or gts and isinstance(gts[0], Box) or (not preds and not gts):
        return [list(preds)], [list(gts)]
    return [list(p) for p in preds], [list(g) for g in gts]


def average_precision(preds, gts, iou_thr: float) -> float:
    """All-point interpolated AP; predictions sharing a confidence form one operating point."""
    pred_sets, gt_sets = _as_sets(preds, gts)
    n_gt = sum(len(g) for g in gt_sets)
    if n_gt == 0:
        return 1.0 if not any(pred_sets) else 0.0
    scored = []  # (confidence, is_tp)
    for ps, gs in zip(pred_sets, gt_sets):
        matched = {m[0] for m in greedy_match(ps, gs, iou_thr)}
        scored += [(p.confidence, i in matched) for i, p in enumerate(ps)]
    if not scored:
        return 0.0
    levels = sorted({c for c, _ in scored}, reverse=True)
    points = []
    for lv in levels:
        sel = [t for c, t in scored if c >= lv]
        tp = sum(sel)
        points.append((tp / n_gt, tp / len(sel)))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(points):
        p_interp = max(pp for rr, pp in points[k:])
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


def mean_average_precision(preds, gts, thresholds=MAP_THRESHOLDS) -> float:
    """Mean AP over IoU thresholds 0.50:0.05:0.95.

    ``preds`` / ``gts`` are box lists for one image or lists of box lists.
    """
    return float(np.mean([average_precision(preds, gts, t) for t in thresholds]))


def parse_boxes(img, box_color, tol: float = 0.35) -> list[Box]:
    """Bounding extents of 8-connected pixel groups close to ``box_color``.

    ``box_color`` is RGB in [0, 1]. Extents are half-open pixel boxes.
    """
    img = as_image(img)
    if img.shape[2] != 3:
        raise ImageError("parse_boxes needs a 3-channel image")
    hit = np.linalg.norm(img - np.asarray(box_color, dtype=np.float64)[None, None], axis=-1) <= tol
    labels, n = ndimage.label(hit, structure=np.ones((3, 3)))
    boxes = []
    for sl in ndimage.find_objects(labels):
        ys, xs = sl
        boxes.append(Box(float(xs.start), float(ys.start), float(xs.stop), float(ys.stop)))
    return sorted(boxes, key=lambda b: (b.y0, b.x0))


def draw_boxes(img, boxes, color) -> np.ndarray:
    """Draw 1-px outlines of half-open boxes onto a copy of ``img``."""
    out = as_image(img, copy=True)
    if out.shape[2] == 1:
        out = np.repeat(out, 3, axis=2)
    h, w = out.shape[:2]
    c = np.asarray(color, dtype=np.float64)
    for b in boxes:
        x0, y0 = int(round(b.x0)), int(round(b.y0))
        x1, y1 = int(round(b.x1)) - 1, int(round(b.y1)) - 1
        x0, x1 = max(x0, 0), min(x1, w - 1)
        y0, y1 = max(y0, 0), min(y1, h - 1)
        out[y0, x0:x1 + 1] = c
        out[y1, x0:x1 + 1] = c
        out[y0:y1 + 1, x0] = c
        out[y0:y1 + 1, x1] = c
    return out


def mask_boxes(mask) -> list[Box]:
    """Boxes around each 8-connected component of a binary mask."""
    labels, _ = ndimage.label(np.asarray(mask) > 0, structure=np.ones((3, 3)))
    return [Box(float(s[1].start), float(s[0].start), float(s[1].stop), float(s[0].stop))
            for s in ndimage.find_objects(labels)]
