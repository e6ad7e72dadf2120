"""PNG / PGM reading and writing. Scalars map to bytes by ``round(v * 255)``."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .codec import encode_color_mask, parse_color_mask
from .types import Palette, as_image


def to_uint8(img) -> np.ndarray:
    img = as_image(img)
    return np.rint(img * 255.0).astype(np.uint8)


def from_uint8(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def write_image(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_uint8(img)
    if data.shape[2] == 1:
        pil = PILImage.fromarray(data[:, :, 0])
    else:
        pil = PILImage.fromarray(data)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".ppm") else "PNG"
    # no metadata chunks, so identical arrays give identical bytes
    pil.save(path, format=fmt)


def read_image(path) -> np.ndarray:
    with PILImage.open(path) as pil:
        if pil.mode in ("1", "L", "LA", "I", "I;16", "F"):
            arr = np.asarray(pil.convert("L"))
        else:
            arr = np.asarray(pil.convert("RGB"))
    return from_uint8(arr)


def write_mask(path, mask, palette: Palette) -> None:
    write_image(path, encode_color_mask(mask, palette))


def read_mask(path, palette: Palette) -> np.ndarray:
    return parse_color_mask(read_image(path), palette, tol=0.0)
