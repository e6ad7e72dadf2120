"""Sample builders for exemplar-conditioned and RPE-aligned progression records."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ..imagecore import DEFAULT_PALETTE, Palette, SampleRecord, as_image, as_mask, encode_color_mask

EXEMPLAR_INSTRUCTION = "According to the demonstration shown in image 1, apply the same process to image 2."
RPE_ALIGNMENT = "Align the retinal position according to the RPE layer mask from image 2."


class LeakageError(ValueError):
    """Demonstration and query images come from the same patient."""


def months_phrase(delta_t: float) -> str:
    n = int(delta_t) if float(delta_t).is_integer() else delta_t
    return f"at {n} months"


@dataclass(frozen=True)
class ExemplarSample:
    demo_input: str
    demo_output: str
    query: str
    instruction: str
    demo_patient: str
    query_patient: str
    task: str = "segment"

    def __post_init__(self):
        if self.demo_patient == self.query_patient:
            raise LeakageError(f"demonstration and query share patient {self.demo_patient!r}")

    @property
    def image_refs(self) -> tuple[str, str, str]:
        return (self.demo_input, self.demo_output, self.query)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExemplarSample":
        return cls(**json.loads(text))


def build_exemplar(demo: tuple[str, str], query: str, task: str, *, demo_patient: str, query_patient: str) -> ExemplarSample:
    """Pair a demonstration (input, output) with a query image from another patient."""
    if demo_patient == query_patient:
        raise LeakageError(f"demonstration and query share patient {demo_patient!r}")
    return ExemplarSample(demo[0], demo[1], query, EXEMPLAR_INSTRUCTION, demo_patient, query_patient, task)


def rpe_prompt(delta_t: float, category: str | None = None) -> str:
    cat = f"{category} " if category else ""
    return f"Predict the {cat}follow-up OCT image {months_phrase(delta_t)}. {RPE_ALIGNMENT}"


def build_rpe_sample(pre_img, post_img, rpe_mask, delta_t: float, *, record_id: str, patient_id: str,
                     refs: tuple[str, str, str], category: str | None = None,
                     palette: Palette = DEFAULT_PALETTE) -> tuple[SampleRecord, dict[str, np.ndarray]]:
    """Build a progression record conditioned on the post-visit RPE mask.

    ``refs`` names the files for ``(pre image, rendered RPE mask, post image)``.
    Returns the record and a ``{ref: image}`` map of files to write.
    """
    pre_img, post_img = as_image(pre_img), as_image(post_img)
    rpe_mask = as_mask(rpe_mask)
    if rpe_mask.shape != post_img.shape[:2] or pre_img.shape[:2] != post_img.shape[:2]:
        raise ValueError(f"shape mismatch: pre {pre_img.shape[:2]}, post {post_img.shape[:2]}, rpe {rpe_mask.shape}")
    if delta_t < 0:
        raise ValueError("delta_t must be >= 0")
    rpe_id = palette.by_name("rpe layer").id
    rendered = encode_color_mask((rpe_mask > 0) * rpe_id, palette)
    warnings = () if rpe_mask.any() else ("empty rpe mask",)
    record = SampleRecord(
        record_id=record_id, patient_id=patient_id, task="progress",
        input_refs=(refs[0], refs[1]), target_ref=refs[2], prompt=rpe_prompt(delta_t, category),
        delta_t=float(delta_t), category=category, warnings=warnings,
    )
    return record, {refs[0]: pre_img, refs[1]: rendered, refs[2]: post_img}


def lesion_perturb(img, lesion_mask, seed: int, margin: int = 3, jitter: float = 1.0, gamma_range=(0.8, 1.2)) -> np.ndarray:
    """Local elastic jitter and gamma inside the dilated bounding box of the lesions."""
    img = as_image(img, copy=True)
    mask = as_mask(lesion_mask).astype(bool)
    if not mask.any():
        return img
    rng = np.random.default_rng(seed)
    ys, xs = np.nonzero(mask)
    h, w = mask.shape
    y0, y1 = max(ys.min() - margin, 0), min(ys.max() + margin + 1, h)
    x0, x1 = max(xs.min() - margin, 0), min(xs.max() + margin + 1, w)
    patch = img[y0:y1, x0:x1]
    ph, pw = patch.shape[:2]
    yy, xx = np.mgrid[0:ph, 0:pw].astype(np.float64)
    sigma = max(min(ph, pw) / 4, 1.0)
    dy = ndimage.gaussian_filter(rng.normal(0, 1, (ph, pw)), sigma)
    dx = ndimage.gaussian_filter(rng.normal(0, 1, (ph, pw)), sigma)
    norm = max(np.abs(dy).max(), np.abs(dx).max(), 1e-12)
    dy, dx = dy / norm * jitter, dx / norm * jitter
    warped = np.stack([
        ndimage.map_coordinates(patch[..., c], [yy + dy, xx + dx], order=1, mode="nearest")
        for c in range(patch.shape[2])
    ], axis=-1)
    g = float(rng.uniform(*gamma_range))
    img[y0:y1, x0:x1] = np.clip(warped, 0, 1) ** g
    return img


def dilate(mask, radius: int) -> np.ndarray:
    mask = as_mask(mask).astype(bool)
    if radius <= 0:
        return mask
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return ndimage.binary_dilation(mask, structure=(xx * xx + yy * yy) <= radius * radius)
