"""Super-resolution pairs and inpainting / outpainting samples."""
from __future__ import annotations

import math

import numpy as np

from ..imagecore import as_image

SR_FACTORS = (5, 7, 9, 11, 13)
INPAINT_RECTS = (1, 5)
INPAINT_COVERAGE = (0.10, 0.50)
OUTPAINT_RETAINED = (0.30, 0.80)
MAX_RETRIES = 1000


class ConstraintError(RuntimeError):
    """A geometric sampling constraint could not be met within the retry budget."""


def box_downsample(img, factor: int) -> np.ndarray:
    img = as_image(img)
    h, w, c = img.shape
    hb, wb = math.ceil(h / factor), math.ceil(w / factor)
    out = np.empty((hb, wb, c))
    for i in range(hb):
        for j in range(wb):
            out[i, j] = img[i * factor:(i + 1) * factor, j * factor:(j + 1) * factor].mean(axis=(0, 1))
    return out


def downsample_pair(img, factor: int):
    """Return ``(low, high)``: the box-averaged image re-upsampled by nearest neighbour, and the original."""
    if factor not in SR_FACTORS:
        raise ValueError(f"super-resolution factor must be one of {SR_FACTORS}, got {factor}")
    img = as_image(img)
    h, w = img.shape[:2]
    if h < factor or w < factor:
        raise ValueError(f"image {w}x{h} is smaller than factor {factor}")
    small = box_downsample(img, factor)
    rows = np.arange(h) // factor
    cols = np.arange(w) // factor
    low = small[rows][:, cols]
    return low, img.copy()


def _sample_rects(rng, h, w):
    n = int(rng.integers(INPAINT_RECTS[0], INPAINT_RECTS[1] + 1))
    # bias per-rectangle size by count so the union tends to land in range
    hi = min(0.75, 0.85 / math.sqrt(n))
    rects = []
    for _ in range(n):
        rw = max(1, int(round(rng.uniform(0.12, hi) * w)))
        rh = max(1, int(round(rng.uniform(0.12, hi) * h)))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        rects.append((x0, y0, x0 + rw, y0 + rh))
    return rects


def make_inpaint(img, seed: int):
    """Zero out 1-5 rectangles whose union covers 10-50% of the image.

    Returns ``(masked, holes)`` where ``holes`` marks removed pixels with 1.
    """
    img = as_image(img)
    holes = np.zeros(img.shape[:2], dtype=np.int64)
    for x0, y0, x1, y1 in make_inpaint_rects(img, seed):
        holes[y0:y1, x0:x1] = 1
    masked = img.copy()
    masked[holes.astype(bool)] = 0.0
    return masked, holes


def make_inpaint_rects(img, seed: int):
    """Same sampling as :func:`make_inpaint`, returning the accepted rectangles."""
    img = as_image(img)
    h, w = img.shape[:2]
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RETRIES):
        rects = _sample_rects(rng, h, w)
        holes = np.zeros((h, w), dtype=np.int64)
        for x0, y0, x1, y1 in rects:
            holes[y0:y1, x0:x1] = 1
        if INPAINT_COVERAGE[0] <= holes.mean() <= INPAINT_COVERAGE[1]:
            return rects
    raise ConstraintError(f"inpaint coverage constraint unsatisfied after {MAX_RETRIES} retries")


def make_outpaint(img, seed: int):
    """Keep one jittered ellipse covering 30-80% of the image; zero the rest.

    Returns ``(masked, kept)`` with ``kept`` marking retained pixels.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(MAX_RETRIES):
        frac = rng.uniform(*OUTPAINT_RETAINED)
        aspect = rng.uniform(0.75, 1.33)
        # pi * a * b = frac * w * h with a / b = aspect (in pixels)
        b = math.sqrt(frac * w * h / (math.pi * aspect))
        a = aspect * b
        cx = w / 2 + rng.uniform(-0.08, 0.08) * w
        cy = h / 2 + rng.uniform(-0.08, 0.08) * h
        kept = ((((xx + 0.5 - cx) / a) ** 2 + ((yy + 0.5 - cy) / b) ** 2) <= 1.0).astype(np.int64)
        retained = kept.mean()
        if OUTPAINT_RETAINED[0] <= retained <= OUTPAINT_RETAINED[1]:
            masked = img * kept[..., None]
            return masked, kept
    raise ConstraintError(f"outpaint retention constraint unsatisfied after {MAX_RETRIES} retries")
