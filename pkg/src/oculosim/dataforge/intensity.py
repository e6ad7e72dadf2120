"""CLAHE and intensity / scale augmentations."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from ..imagecore import as_image

N_BINS = 256
BRIGHTNESS_OFFSETS = (-10 / 255, 20 / 255)
CLAHE_CLIP = 2.0
CLAHE_GRID = (8, 8)


def _bins(channel: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(channel * N_BINS), 0, N_BINS - 1).astype(np.int64)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.rint(np.linspace(0, n, tiles + 1)).astype(np.int64)


def tile_lut(bins: np.ndarray, clip: float) -> np.ndarray:
    """Clip-limited equalisation lookup table for one tile (values in [0, 1])."""
    hist = np.bincount(bins.ravel(), minlength=N_BINS).astype(np.float64)
    total = hist.sum()
    if total == 0:
        return np.linspace(0, 1, N_BINS)
    if np.isfinite(clip):
        limit = clip * total / N_BINS
        excess = np.maximum(hist - limit, 0.0).sum()
        hist = np.minimum(hist, limit) + excess / N_BINS
    return np.cumsum(hist) / total


def _clahe_channel(channel: np.ndarray, clip: float, grid) -> np.ndarray:
    h, w = channel.shape
    gy, gx = min(grid[0], h), min(grid[1], w)
    bins = _bins(channel)
    ye, xe = _tile_edges(h, gy), _tile_edges(w, gx)
    luts = np.empty((gy, gx, N_BINS))
    for i in range(gy):
        for j in range(gx):
            luts[i, j] = tile_lut(bins[ye[i]:ye[i + 1], xe[j]:xe[j + 1]], clip)
    cy = (ye[:-1] + ye[1:] - 1) / 2.0
    cx = (xe[:-1] + xe[1:] - 1) / 2.0
    # fractional tile coordinate of every row / column, clamped at the outer centres
    ty = np.clip(np.interp(np.arange(h), cy, np.arange(gy)), 0, gy - 1)
    tx = np.clip(np.interp(np.arange(w), cx, np.arange(gx)), 0, gx - 1)
    y0 = np.floor(ty).astype(int)
    x0 = np.floor(tx).astype(int)
    y1 = np.minimum(y0 + 1, gy - 1)
    x1 = np.minimum(x0 + 1, gx - 1)
    wy = (ty - y0)[:, None]
    wx = (tx - x0)[None, :]
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    v00 = luts[Y0, X0, bins]
    v01 = luts[Y0, X1, bins]
    v10 = luts[Y1, X0, bins]
    v11 = luts[Y1, X1, bins]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    return np.clip(out, 0.0, 1.0)


def clahe(img, clip: float = CLAHE_CLIP, grid=CLAHE_GRID) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation, applied per channel.

    ``clip`` is a multiple of the mean bin height of a 256-bin tile histogram;
    ``float('inf')`` disables clipping. Tile mappings are blended bilinearly
    between tile centres.
    """
    if not clip > 0:
        raise ValueError(f"clip limit must be > 0, got {clip}")
    if min(grid) < 1:
        raise ValueError(f"grid must be >= 1, got {grid}")
    img = as_image(img)
    return np.stack([_clahe_channel(img[..., c], clip, grid) for c in range(img.shape[2])], axis=-1)


@dataclass(frozen=True)
class AugmentationSpec:
    brightness_offsets: tuple[float, ...] = BRIGHTNESS_OFFSETS
    contrast_range: tuple[float, float] = (0.8, 1.2)
    gamma_range: tuple[float, float] = (0.8, 1.2)
    scale_range: tuple[float, float] | None = (0.9, 1.1)
    clahe_clip: float = CLAHE_CLIP
    clahe_grid: tuple[int, int] = CLAHE_GRID
    apply_clahe: bool = False

    def __post_init__(self):
        for name in ("contrast_range", "gamma_range", "scale_range"):
            r = getattr(self, name)
            if r is not None and (r[0] > r[1] or r[0] <= 0):
                raise ValueError(f"{name} must be an ordered positive range, got {r}")
        if not self.brightness_offsets:
            raise ValueError("brightness_offsets must not be empty")
        if not self.clahe_clip > 0:
            raise ValueError("clahe_clip must be > 0")
        if min(self.clahe_grid) < 1:
            raise ValueError("clahe_grid must be >= 1")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(brightness_offsets=(0.0,), contrast_range=(1.0, 1.0), gamma_range=(1.0, 1.0), scale_range=None)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown AugmentationSpec fields: {sorted(set(d) - known)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def rescale(img: np.ndarray, s: float) -> np.ndarray:
    """Resize by ``s`` (bilinear) and centre-crop / zero-pad back to the input size."""
    h, w, c = img.shape
    if s == 1.0:
        return img.copy()
    zoomed = ndimage.zoom(img, (s, s, 1), order=1, mode="nearest", grid_mode=True)
    zh, zw = zoomed.shape[:2]
    out = np.zeros_like(img)
    # centre-align the two frames
    sy, sx = (zh - h) // 2, (zw - w) // 2
    src_y0, dst_y0 = max(sy, 0), max(-sy, 0)
    src_x0, dst_x0 = max(sx, 0), max(-sx, 0)
    hh = min(h - dst_y0, zh - src_y0)
    ww = min(w - dst_x0, zw - src_x0)
    out[dst_y0:dst_y0 + hh, dst_x0:dst_x0 + ww] = zoomed[src_y0:src_y0 + hh, src_x0:src_x0 + ww]
    return out


def augment(img, spec: AugmentationSpec, seed: int) -> np.ndarray:
    """scale -> contrast -> brightness -> gamma -> clamp (-> optional CLAHE)."""
    out = as_image(img, copy=True)
    rng = np.random.default_rng(seed)
    b = float(spec.brightness_offsets[int(rng.integers(len(spec.brightness_offsets)))])
    c = float(rng.uniform(*spec.contrast_range))
    g = float(rng.uniform(*spec.gamma_range))
    s = float(rng.uniform(*spec.scale_range)) if spec.scale_range is not None else 1.0
    if s != 1.0:
        out = rescale(out, s)
    mean = out.mean()
    out = (out - mean) * c + mean + b
    out = np.clip(out, 0.0, None) ** g
    out = np.clip(out, 0.0, 1.0)
    if spec.apply_clahe:
        out = clahe(out, spec.clahe_clip, spec.clahe_grid)
    return out
