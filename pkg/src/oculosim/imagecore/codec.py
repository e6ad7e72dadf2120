"""Color-coded mask codec and label standardisation."""
from __future__ import annotations

import numpy as np

from .types import ImageError, Palette, as_image, as_mask

DEFAULT_TOL = 0.35


def parse_color_mask(img, palette: Palette, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Assign each pixel to the nearest palette color within ``tol``.

    Distances are Euclidean in RGB space with channels in [0, 1]. Pixels with
    no palette color within ``tol`` become background; equal distances resolve
    to the lowest class id.
    """
    img = as_image(img)
    if img.shape[2] != 3:
        raise ImageError("parse_color_mask needs a 3-channel image")
    if tol < 0:
        raise ValueError("tol must be >= 0")
    h, w, _ = img.shape
    if not palette.entries:
        return np.zeros((h, w), dtype=np.int64)
    order = np.argsort([e.id for e in palette.entries], kind="stable")
    ids = np.asarray([palette.entries[i].id for i in order])
    colors = palette.colors()[order]
    d = np.linalg.norm(img[:, :, None, :] - colors[None, None], axis=-1)
    # argmin returns the first minimum, i.e. the lowest id after sorting
    best = np.argmin(d, axis=-1)
    best_d = np.take_along_axis(d, best[..., None], axis=-1)[..., 0]
    out = ids[best]
    out[best_d > tol] = 0
    return out.astype(np.int64)


def encode_color_mask(mask, palette: Palette) -> np.ndarray:
    mask = as_mask(mask)
    out = np.zeros(mask.shape + (3,), dtype=np.float64)
    known = set(palette.ids)
    for cid in np.unique(mask):
        cid = int(cid)
        if cid == 0:
            continue
        if cid not in known:
            raise KeyError(f"label id {cid} is not in the palette")
        out[mask == cid] = palette.color(cid)
    return out


def standardize_labels(mask) -> list[tuple[int, np.ndarray]]:
    """Split a multi-label mask into one binary mask per nonzero class."""
    mask = as_mask(mask)
    return [(int(c), (mask == c).astype(np.int64)) for c in np.unique(mask) if c != 0]


def tiny_target_filter(binary, threshold: int = 50) -> bool:
    """True when the binary target has at least ``threshold`` foreground pixels."""
    binary = as_mask(binary)
    if binary.size and binary.max() > 1:
        raise ImageError("tiny_target_filter expects a {0,1} mask")
    return int(binary.sum()) >= threshold
