"""Tissue masks and tissue-gated signed change maps between two visits."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image as PILImage
from PIL import ImageDraw
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import disk

from ..imagecore import as_image, as_mask


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def tissue_mask(ref, close_radius: int = 3) -> np.ndarray:
    """Otsu threshold, keep the largest component, close, fill holes."""
    g = as_image(ref).mean(axis=2)
    if not g.any():
        warnings.warn("tissue_mask: reference image is all zero; returning an empty mask", stacklevel=2)
        return np.zeros(g.shape, dtype=np.int64)
    if g.min() == g.max():
        return np.ones(g.shape, dtype=np.int64)
    fg = g > threshold_otsu(g)
    fg = largest_component(fg)
    # pad so closing does not erode at the border
    r = close_radius
    padded = np.pad(fg, r, mode="constant")
    closed = ndimage.binary_closing(padded, structure=disk(r))[r:-r, r:-r] if r > 0 else fg
    filled = ndimage.binary_fill_holes(closed | fg)
    return largest_component(filled).astype(np.int64)


@dataclass
class SignedChangeMap:
    values: np.ndarray
    tissue: np.ndarray
    peak: tuple[int, int] | None  # (x, y)
    scale: float  # max |raw| before normalisation


def signed_change_map(before, after, tissue) -> SignedChangeMap:
    """Channel-mean ``after - before`` gated by ``tissue``, scaled into [-1, 1].

    Positive values mean the follow-up is brighter (rendered red).
    """
    before, after = as_image(before), as_image(after)
    tissue = as_mask(tissue).astype(bool)
    if before.shape[:2] != after.shape[:2] or tissue.shape != before.shape[:2]:
        raise ValueError(f"shape mismatch: before {before.shape}, after {after.shape}, tissue {tissue.shape}")
    raw = (after.mean(axis=2) - before.mean(axis=2)) * tissue
    mag = np.abs(raw)
    scale = float(mag.max())
    if scale == 0.0:
        return SignedChangeMap(np.zeros_like(raw), tissue.astype(np.int64), None, 0.0)
    idx = int(np.argmax(mag))  # first maximum in row-major order
    y, x = divmod(idx, raw.shape[1])
    return SignedChangeMap(raw / scale, tissue.astype(np.int64), (x, y), scale)


def render_change_map(cmap: SignedChangeMap, path=None, upscale: int = 4) -> np.ndarray:
    """Red-white-blue rendering with an arrow pointing at the peak change."""
    rgba = colormaps["bwr"]((cmap.values + 1.0) / 2.0)
    rgb = (rgba[..., :3] * 255).round().astype(np.uint8)
    pil = PILImage.fromarray(rgb)
    if upscale > 1:
        pil = pil.resize((pil.width * upscale, pil.height * upscale), PILImage.NEAREST)
    if cmap.peak is not None:
        draw = ImageDraw.Draw(pil)
        px, py = (cmap.peak[0] + 0.5) * upscale, (cmap.peak[1] + 0.5) * upscale
        # arrow from the upper-left (or lower-right near the corner) towards the peak
        length = max(pil.width, pil.height) * 0.18
        d = -1.0 if px > length and py > length else 1.0
        sx, sy = px + d * length * -0.707, py + d * length * -0.707
        draw.line([(sx, sy), (px, py)], fill=(0, 0, 0), width=max(1, upscale // 2))
        ang = math.atan2(py - sy, px - sx)
        head = length * 0.35
        for da in (0.45, -0.45):
            draw.line([(px, py), (px - head * math.cos(ang + da), py - head * math.sin(ang + da))],
                      fill=(0, 0, 0), width=max(1, upscale // 2))
    out = np.asarray(pil)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        pil.save(path, format="PNG")
    return out


def change_concentration(a, b, region) -> float:
    """Fraction of total absolute channel-mean difference that falls inside ``region``."""
    a, b = as_image(a), as_image(b)
    diff = np.abs(a.mean(axis=2) - b.mean(axis=2))
    total = diff.sum()
    if total == 0:
        return 0.0
    return float(diff[as_mask(region).astype(bool)].sum() / total)
