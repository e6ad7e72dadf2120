from __future__ import annotations

import numpy as np
from skimage.transform import resize as sk_resize

from .types import as_image


def resize(img, size: tuple[int, int]) -> np.ndarray:
    """Resize to ``(height, width)``; exact block means for integer downscales."""
    img = as_image(img)
    h, w, c = img.shape
    th, tw = size
    if (th, tw) == (h, w):
        return img.copy()
    if h % th == 0 and w % tw == 0:
        fy, fx = h // th, w // tw
        return img.reshape(th, fy, tw, fx, c).mean(axis=(1, 3))
    out = sk_resize(img, (th, tw, c), order=1, mode="edge", anti_aliasing=th < h or tw < w)
    return np.clip(out, 0.0, 1.0)


def resize_mask(mask, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a label mask."""
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = np.minimum((np.arange(size[0]) + 0.5) * h / size[0], h - 1).astype(int)
    cols = np.minimum((np.arange(size[1]) + 0.5) * w / size[1], w - 1).astype(int)
    return mask[rows][:, cols]
