from .codec import DEFAULT_TOL, encode_color_mask, parse_color_mask, standardize_labels, tiny_target_filter
from .io import read_image, read_mask, write_image, write_mask
from .manifest import (
    SPLITS,
    TASKS,
    DatasetManifest,
    ManifestError,
    SampleRecord,
    patient_split,
    split_counts,
)
from .resample import resize, resize_mask
from .types import (
    COLOR_NAMES,
    DEFAULT_PALETTE,
    ImageError,
    Palette,
    PaletteEntry,
    as_image,
    as_mask,
    slice_volume,
    stack_volume,
    to_gray,
    to_rgb,
)

__all__ = [
    "COLOR_NAMES", "DEFAULT_PALETTE", "DEFAULT_TOL", "DatasetManifest", "ImageError", "ManifestError",
    "Palette", "PaletteEntry", "SPLITS", "SampleRecord", "TASKS", "as_image", "as_mask",
    "encode_color_mask", "parse_color_mask", "patient_split", "read_image", "read_mask", "resize", "resize_mask",
    "slice_volume", "split_counts", "stack_volume", "standardize_labels", "tiny_target_filter",
    "to_gray", "to_rgb", "write_image", "write_mask",
]
