"""Array conventions for images, label masks, palettes and volumes.

Images are ``float64`` arrays of shape ``(H, W, C)`` with ``C in (1, 3)`` and
values in ``[0, 1]``. Label masks are integer arrays of shape ``(H, W)``.
Volumes are ``(D, H, W, C)`` stacks of images.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ImageError(ValueError):
    """Raised when an array violates the image / mask conventions."""


def as_image(data, *, copy: bool = False) -> np.ndarray:
    """Validate and normalise ``data`` to an ``(H, W, C)`` float image."""
    arr = np.array(data, dtype=np.float64, copy=copy or None)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageError(f"image must be HxW, HxWx1 or HxWx3, got shape {arr.shape}")
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise ImageError("image values must lie in [0, 1]")
    return arr


def as_mask(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ImageError(f"label mask must be 2-D, got shape {arr.shape}")
    if arr.dtype.kind not in "iub":
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ImageError("label mask must hold integer class ids")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise ImageError("label ids must be non-negative")
    return arr


def to_rgb(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


def to_gray(img: np.ndarray) -> np.ndarray:
    """Channel mean, returned as a 2-D array."""
    return as_image(img).mean(axis=2)


@dataclass(frozen=True)
class PaletteEntry:
    id: int
    rgb: tuple[int, int, int]
    name: str


@dataclass(frozen=True)
class Palette:
    entries: tuple[PaletteEntry, ...] = field(default_factory=tuple)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        colors = [tuple(e.rgb) for e in self.entries]
        if any(i <= 0 for i in ids):
            raise ImageError("palette ids must be positive (0 is background)")
        if len(set(ids)) != len(ids):
            raise ImageError("palette class ids must be unique")
        if len(set(colors)) != len(colors):
            raise ImageError("palette colors must be unique")
        for c in colors:
            if len(c) != 3 or any(not 0 <= v <= 255 for v in c):
                raise ImageError(f"invalid rgb {c}")

    @classmethod
    def from_list(cls, items) -> "Palette":
        entries = []
        for it in items:
            unknown = set(it) - {"id", "name", "rgb"}
            if unknown:
                raise ImageError(f"unknown palette fields: {sorted(unknown)}")
            entries.append(PaletteEntry(int(it["id"]), tuple(int(v) for v in it["rgb"]), str(it["name"])))
        return cls(tuple(entries))

    def to_list(self) -> list[dict]:
        return [{"id": e.id, "name": e.name, "rgb": list(e.rgb)} for e in self.entries]

    @classmethod
    def load(cls, path) -> "Palette":
        return cls.from_list(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_list(), indent=2) + "\n")

    @property
    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    def color(self, class_id: int) -> np.ndarray:
        for e in self.entries:
            if e.id == class_id:
                return np.asarray(e.rgb, dtype=np.float64) / 255.0
        raise KeyError(f"class id {class_id} not in palette")

    def by_name(self, name: str) -> PaletteEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def colors(self) -> np.ndarray:
        """``(K, 3)`` array of colors in [0, 1], in entry order."""
        return np.asarray([e.rgb for e in self.entries], dtype=np.float64).reshape(-1, 3) / 255.0


# class names are reused by the forge prompts ("segment the optic disc using red")
DEFAULT_PALETTE = Palette((
    PaletteEntry(1, (255, 0, 0), "optic disc"),
    PaletteEntry(2, (0, 0, 255), "optic cup"),
    PaletteEntry(3, (0, 255, 0), "vessels"),
    PaletteEntry(4, (255, 255, 0), "fovea"),
    PaletteEntry(5, (0, 255, 255), "lesions"),
    PaletteEntry(6, (255, 0, 255), "rpe layer"),
    PaletteEntry(7, (255, 255, 255), "macular hole"),
))

COLOR_NAMES = {
    (255, 0, 0): "red",
    (0, 0, 255): "blue",
    (0, 255, 0): "green",
    (255, 255, 0): "yellow",
    (0, 255, 255): "cyan",
    (255, 0, 255): "magenta",
    (255, 255, 255): "white",
}


def stack_volume(slices) -> np.ndarray:
    vol = np.stack([as_image(s) for s in slices], axis=0)
    return vol


def slice_volume(vol) -> list[np.ndarray]:
    """Split a ``(D, H, W[, C])`` volume into its depth-ordered planes."""
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim == 3:
        vol = vol[..., None]
    if vol.ndim != 4:
        raise ImageError(f"volume must be 3-D or 4-D, got shape {vol.shape}")
    if vol.shape[0] < 1:
        raise ImageError("volume depth must be >= 1")
    return [as_image(vol[k], copy=True) for k in range(vol.shape[0])]
