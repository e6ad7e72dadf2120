"""Fundus-style degradations: illumination imbalance, blur and spot artefacts."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from ..imagecore import as_image

STEPS = ("illumination", "gaussian_blur", "motion_blur", "spots")


@dataclass(frozen=True)
class Illumination:
    center: tuple[float, float] = (0.5, 0.5)
    strength: tuple[float, float] = (0.5, 1.5)  # multiplicative gain at the center
    spread: float = 0.35  # falloff scale, fraction of the image diagonal


@dataclass(frozen=True)
class MotionBlur:
    length: float = 9.0
    angle: float = 0.0


@dataclass(frozen=True)
class Spots:
    count: tuple[int, int] = (1, 5)
    radius: tuple[float, float] = (3.0, 12.0)
    polarity: str = "bright"

    def __post_init__(self):
        if self.count[0] < 1 or self.count[1] < self.count[0]:
            raise ValueError(f"spot count range must start at >= 1, got {self.count}")
        if self.polarity not in ("bright", "dark"):
            raise ValueError(f"polarity must be bright or dark, got {self.polarity!r}")


@dataclass(frozen=True)
class DegradationSpec:
    illumination: Illumination | None = None
    gaussian_blur: float | None = None
    motion_blur: MotionBlur | None = None
    spots: Spots | None = None
    combine: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.gaussian_blur is not None and self.gaussian_blur <= 0:
            raise ValueError("gaussian_blur sigma must be > 0")
        if self.combine is not None:
            for name in self.combine:
                if name not in STEPS:
                    raise ValueError(f"unknown degradation step {name!r}")
                if getattr(self, name) is None:
                    raise ValueError(f"combine lists {name!r} but it is not configured")

    @property
    def order(self) -> tuple[str, ...]:
        if self.combine is not None:
            return tuple(self.combine)
        return tuple(s for s in STEPS if getattr(self, s) is not None)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.combine is not None:
            d["combine"] = list(self.combine)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown DegradationSpec fields: {sorted(set(d) - known)}")

        def sub(klass, v):
            if v is None:
                return None
            extra = set(v) - {f.name for f in fields(klass)}
            if extra:
                raise ValueError(f"unknown {klass.__name__} fields: {sorted(extra)}")
            return klass(**{k: tuple(x) if isinstance(x, list) else x for k, x in v.items()})

        return cls(
            illumination=sub(Illumination, d.get("illumination")),
            gaussian_blur=d.get("gaussian_blur"),
            motion_blur=sub(MotionBlur, d.get("motion_blur")),
            spots=sub(Spots, d.get("spots")),
            combine=tuple(d["combine"]) if d.get("combine") is not None else None,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def motion_kernel(length: float, angle: float) -> np.ndarray:
    """Normalised line kernel; sub-pixel samples are splatted bilinearly."""
    half = max(length, 1.0) / 2
    size = 2 * int(math.ceil(half)) + 1
    k = np.zeros((size, size))
    c = size // 2
    n = max(int(math.ceil(length * 4)), 1)
    for t in np.linspace(-half, half, n):
        x, y = c + t * math.cos(angle), c + t * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            if 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                k[y0 + dy, x0 + dx] += w
    return k / k.sum()


def _illumination(img, spec: Illumination, rng):
    h, w = img.shape[:2]
    gain = rng.uniform(*spec.strength)
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = spec.center[0] * w, spec.center[1] * h
    scale = spec.spread * math.hypot(h, w)
    falloff = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * scale * scale))
    field_ = 1.0 + (gain - 1.0) * falloff
    return img * field_[..., None]


def _spots(img, spec: Spots, rng):
    h, w = img.shape[:2]
    out = img.copy()
    yy, xx = np.mgrid[0:h, 0:w]
    target = 1.0 if spec.polarity == "bright" else 0.0
    for _ in range(int(rng.integers(spec.count[0], spec.count[1] + 1))):
        r = rng.uniform(*spec.radius)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        wgt = 0.85 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
        out = out * (1 - wgt[..., None]) + target * wgt[..., None]
    return out


def degrade(img, spec: DegradationSpec, seed: int) -> np.ndarray:
    """Apply the configured degradations in order; output is clamped to [0, 1]."""
    out = as_image(img, copy=True)
    rng = np.random.default_rng(seed)
    for step in spec.order:
        if step == "illumination":
            out = _illumination(out, spec.illumination, rng)
        elif step == "gaussian_blur":
            out = gaussian_blur(out, spec.gaussian_blur)
        elif step == "motion_blur":
            k = motion_kernel(spec.motion_blur.length, spec.motion_blur.angle)
            out = np.stack([ndimage.correlate(out[..., c], k, mode="reflect") for c in range(out.shape[2])], axis=-1)
        elif step == "spots":
            out = _spots(out, spec.spots, rng)
    return np.clip(out, 0.0, 1.0)


def random_degradation(rng) -> DegradationSpec:
    """Draw a random non-empty combination with the default magnitudes."""
    while True:
        pick = rng.random(4) < 0.5
        if pick.any():
            break
    kw = {}
    if pick[0]:
        kw["illumination"] = Illumination(center=(float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8))))
    if pick[1]:
        kw["gaussian_blur"] = float(rng.uniform(0.8, 2.5))
    if pick[2]:
        kw["motion_blur"] = MotionBlur(length=float(rng.uniform(5, 15)), angle=float(rng.uniform(0, math.pi)))
    if pick[3]:
        kw["spots"] = Spots(polarity="bright" if rng.random() < 0.5 else "dark")
    return DegradationSpec(**kw)
