"""Procedural retina phantoms with exact ground-truth masks.

Geometry is sampled once per seed in resolution-free coordinates (fractions of
the image width / height) and rendered at any size, so the same geometry can be
re-rendered as a fundus photo, an angiogram, or after a simulated follow-up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..imagecore import ImageError

KINDS = ("fundus", "angio", "bscan")
FUNDUS_MASKS = ("disc", "cup", "vessels", "fovea", "lesions")
BSCAN_MASKS = ("rpe_band", "hole", "lesions")


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 128
    height: int = 128
    kind: str = "fundus"
    lesion_count_range: tuple[int, int] = (0, 5)
    disc_radius_frac: float = 0.15
    vessel_depth: int = 3
    # nerve fiber / inner / outer / rpe thickness, as fractions of the height
    layer_thicknesses: tuple[float, ...] = (0.05, 0.12, 0.1, 0.035)
    hole_probability: float = 0.7

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ImageError(f"phantom dims must be >= 32, got {self.width}x{self.height}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        lo, hi = self.lesion_count_range
        if not 0 <= lo <= hi <= 8:
            raise ValueError(f"lesion_count_range must lie within [0, 8], got {self.lesion_count_range}")


@dataclass(frozen=True)
class Lesion:
    cx: float
    cy: float
    rx: float  # fraction of width
    ry: float
    angle: float
    bright: bool

    def scaled(self, s: float) -> "Lesion":
        return replace(self, rx=self.rx * s, ry=self.ry * s)


@dataclass(frozen=True)
class Geometry:
    kind: str
    texture: tuple[tuple[float, float, float, float], ...]
    lesions: tuple[Lesion, ...] = ()
    # fundus / angio
    disc: tuple[float, float, float] = (0.0, 0.0, 0.0)  # cx, cy, radius (fraction of width)
    cup_ratio: float = 0.5
    vessels: tuple[tuple[float, float, float, float, float], ...] = ()  # x0, y0, x1, y1, width
    fovea: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # bscan
    surface: tuple[float, float, float] = (0.0, 0.0, 0.0)  # ilm depth, curvature, pit depth
    rpe_depth: float = 0.0
    layers: tuple[float, ...] = ()
    hole_center: float = 0.5
    hole_width: float = 0.0  # fraction of width at the inner surface


@dataclass
class PhantomSample:
    image: np.ndarray
    masks: dict[str, np.ndarray]
    patient_id: str
    geometry: Geometry
    spec: PhantomSpec = field(default_factory=PhantomSpec)


def _grid(spec: PhantomSpec):
    u = (np.arange(spec.width) + 0.5) / spec.width
    v = (np.arange(spec.height) + 0.5) / spec.height
    return np.meshgrid(u, v)


def _texture(geom: Geometry, u, v) -> np.ndarray:
    t = np.zeros_like(u)
    for amp, fx, fy, phase in geom.texture:
        t += amp * np.sin(2 * math.pi * (fx * u + fy * v) + phase)
    return t


def _ellipse_mask(les: Lesion, u, v, aspect: float) -> np.ndarray:
    # work in width units so radii are fractions of the width
    dx = u - les.cx
    dy = (v - les.cy) * aspect
    c, s = math.cos(les.angle), math.sin(les.angle)
    a = (c * dx + s * dy) / max(les.rx, 1e-9)
    b = (-s * dx + c * dy) / max(les.ry, 1e-9)
    return (a * a + b * b) <= 1.0 if les.rx > 0 and les.ry > 0 else np.zeros_like(u, dtype=bool)


def _segment_dist(u, v, seg, aspect: float) -> np.ndarray:
    x0, y0, x1, y1, _ = seg
    px, py = u - x0, (v - y0) * aspect
    dx, dy = x1 - x0, (y1 - y0) * aspect
    L2 = dx * dx + dy * dy
    t = np.clip((px * dx + py * dy) / L2, 0.0, 1.0) if L2 > 0 else np.zeros_like(u)
    return np.hypot(px - t * dx, py - t * dy)


def _sample_texture(rng) -> tuple:
    return tuple(
        (float(rng.uniform(0.01, 0.03)), float(rng.uniform(-6, 6)), float(rng.uniform(-6, 6)), float(rng.uniform(0, 2 * math.pi)))
        for _ in range(4)
    )


def _sample_lesions(rng, spec: PhantomSpec, avoid) -> tuple[Lesion, ...]:
    lo, hi = spec.lesion_count_range
    n = int(rng.integers(lo, hi + 1))
    out = []
    tries = 0
    while len(out) < n and tries < 200:
        tries += 1
        if spec.kind == "bscan":
            cx, cy = rng.uniform(0.15, 0.85), rng.uniform(0.45, 0.6)
        else:
            ang, rad = rng.uniform(0, 2 * math.pi), rng.uniform(0.05, 0.3)
            cx, cy = 0.5 + rad * math.cos(ang), 0.5 + rad * math.sin(ang)
        rx, ry = rng.uniform(0.025, 0.06), rng.uniform(0.02, 0.05)
        les = Lesion(float(cx), float(cy), float(rx), float(ry), float(rng.uniform(0, math.pi)), bool(rng.random() < 0.5))
        if any(math.hypot(cx - ax, cy - ay) < ar + max(rx, ry) * 2.5 for ax, ay, ar in avoid):
            continue
        out.append(les)
    return tuple(out)


def sample_geometry(spec: PhantomSpec, rng) -> Geometry:
    texture = _sample_texture(rng)
    if spec.kind == "bscan":
        th = spec.layer_thicknesses
        ilm = float(rng.uniform(0.3, 0.36))
        curv = float(rng.uniform(-0.15, 0.15))
        pit = float(rng.uniform(0.02, 0.05))
        rpe = ilm + sum(th[:-1]) + float(rng.uniform(0.0, 0.03))
        hole_c = float(rng.uniform(0.42, 0.58))
        hole_w = float(rng.uniform(0.06, 0.14)) if rng.random() < spec.hole_probability else 0.0
        lesions = _sample_lesions(rng, replace(spec, lesion_count_range=(0, 0)), [])
        return Geometry("bscan", texture, lesions, surface=(ilm, curv, pit), rpe_depth=rpe,
                        layers=tuple(th), hole_center=hole_c, hole_width=hole_w)

    side = 1.0 if rng.random() < 0.5 else -1.0
    r = spec.disc_radius_frac * float(rng.uniform(0.92, 1.08))
    dcx = 0.5 + side * float(rng.uniform(0.12, 0.18))
    dcy = 0.5 + float(rng.uniform(-0.05, 0.05))
    cup = float(rng.uniform(0.4, 0.7))
    fx, fy = 0.5 - side * float(rng.uniform(0.1, 0.14)), 0.5 + float(rng.uniform(-0.03, 0.03))
    fovea = (fx, fy, float(rng.uniform(0.04, 0.06)))

    vessels = []

    def grow(x, y, ang, length, width, depth):
        x1, y1 = x + length * math.cos(ang), y + length * math.sin(ang)
        vessels.append((x, y, x1, y1, width))
        if depth <= 1:
            return
        spread = float(rng.uniform(0.3, 0.6))
        for sgn in (-1.0, 1.0):
            grow(x1, y1, ang + sgn * spread + float(rng.normal(0, 0.1)), length * float(rng.uniform(0.6, 0.8)), width * 0.7, depth - 1)

    base = math.pi if side > 0 else 0.0
    for dy in (-1.0, 1.0):
        ang = base + dy * float(rng.uniform(0.5, 0.9))
        grow(dcx, dcy, ang, float(rng.uniform(0.2, 0.26)), 0.03, spec.vessel_depth)
        # nasal branches
        grow(dcx, dcy, base + math.pi + dy * float(rng.uniform(0.4, 0.9)), float(rng.uniform(0.12, 0.16)), 0.022, max(1, spec.vessel_depth - 1))

    lesions = _sample_lesions(rng, spec, [(dcx, dcy, r), (fx, fy, fovea[2] * 0.5)])
    return Geometry(spec.kind, texture, lesions, disc=(dcx, dcy, r), cup_ratio=cup, vessels=tuple(vessels), fovea=fovea)


def _render_fundus(geom: Geometry, spec: PhantomSpec):
    u, v = _grid(spec)
    aspect = spec.height / spec.width
    ru = (u - 0.5)
    rv = (v - 0.5) * aspect
    fov = np.hypot(ru, rv) <= 0.48
    tex = _texture(geom, u, v)

    dcx, dcy, dr = geom.disc
    ddist = np.hypot(u - dcx, (v - dcy) * aspect)
    disc = ddist <= dr
    cup = ddist <= dr * geom.cup_ratio
    vessels = np.zeros_like(fov)
    for seg in geom.vessels:
        vessels |= _segment_dist(u, v, seg, aspect) <= seg[4] / 2
    vessels &= fov & ~disc
    fcx, fcy, fr = geom.fovea
    fovea = np.hypot(u - fcx, (v - fcy) * aspect) <= fr
    lesions = np.zeros_like(fov)
    lesion_kind = np.zeros(u.shape, dtype=np.int8)
    for les in geom.lesions:
        m = _ellipse_mask(les, u, v, aspect) & fov
        lesions |= m
        lesion_kind[m] = 1 if les.bright else 2

    shade = 1.0 - 0.6 * (ru * ru + rv * rv)
    if geom.kind == "angio":
        g = (0.18 + tex) * shade
        g = np.where(fovea, g * 0.4, g)
        g = np.where(vessels, 0.85 + tex, g)
        g = np.where(disc, 0.55 + tex, g)
        g = np.where(cup, 0.7 + tex, g)
        g = np.where(lesion_kind == 1, 0.95, g)
        g = np.where(lesion_kind == 2, 0.04, g)
        g = np.where(fov, g, 0.0)
        img = np.clip(g, 0.0, 1.0)[:, :, None]
    else:
        base = np.array([0.78, 0.36, 0.16])
        img = (base[None, None] + tex[..., None]) * shade[..., None]
        img = np.where(fovea[..., None], img * np.array([0.7, 0.6, 0.6]), img)
        img = np.where(vessels[..., None], np.array([0.5, 0.08, 0.04]) + tex[..., None], img)
        img = np.where(disc[..., None], np.array([0.98, 0.78, 0.5]) + tex[..., None], img)
        img = np.where(cup[..., None], np.array([1.0, 0.93, 0.8]), img)
        img = np.where((lesion_kind == 1)[..., None], np.array([0.95, 0.88, 0.35]), img)
        img = np.where((lesion_kind == 2)[..., None], np.array([0.3, 0.02, 0.02]), img)
        img = np.where(fov[..., None], img, 0.0)
        img = np.clip(img, 0.0, 1.0)
    masks = {
        "disc": disc.astype(np.int64),
        "cup": cup.astype(np.int64),
        "vessels": vessels.astype(np.int64),
        "fovea": fovea.astype(np.int64),
        "lesions": lesions.astype(np.int64),
    }
    return img, masks


def _render_bscan(geom: Geometry, spec: PhantomSpec):
    u, v = _grid(spec)
    ilm0, curv, pit = geom.surface
    hc = geom.hole_center
    bend = curv * (u - 0.5) ** 2
    ilm = ilm0 + bend + pit * np.exp(-((u - hc) ** 2) / (2 * 0.05**2))
    rpe_top = geom.rpe_depth + bend
    rpe_bot = rpe_top + geom.layers[-1]
    tex = _texture(geom, u, v)

    g = np.zeros_like(u)
    depth = (v - ilm) / np.maximum(rpe_top - ilm, 1e-6)  # 0 at ILM, 1 at RPE
    retina = (v >= ilm) & (v < rpe_top)
    g = np.where(retina, 0.45 - 0.25 * np.sin(np.pi * np.clip(depth, 0, 1)) + tex, g)
    nfl = retina & (v < ilm + geom.layers[0])
    g = np.where(nfl, 0.62 + tex, g)
    rpe = (v >= rpe_top) & (v < rpe_bot)
    g = np.where(rpe, 0.92 + tex * 0.5, g)
    choroid = v >= rpe_bot
    g = np.where(choroid, (0.4 - 0.5 * (v - rpe_bot)) + tex, g)

    hole = np.zeros_like(retina)
    if geom.hole_width > 0:
        half_top = geom.hole_width / 2
        half_bot = geom.hole_width * 0.9
        w = half_top + (half_bot - half_top) * np.clip(depth, 0, 1)
        hole = retina & (np.abs(u - hc) <= w) & (v < rpe_top - 0.02)
    g = np.where(hole, 0.03, g)
    lesions = np.zeros_like(retina)
    for les in geom.lesions:
        m = _ellipse_mask(les, u, v, spec.height / spec.width)
        lesions |= m
    g = np.where(lesions, 0.8, g)
    img = np.clip(g, 0.0, 1.0)[:, :, None]
    masks = {
        "rpe_band": rpe.astype(np.int64),
        "hole": hole.astype(np.int64),
        "lesions": lesions.astype(np.int64),
    }
    return img, masks


def render(geom: Geometry, spec: PhantomSpec):
    """Render ``geom`` at ``spec``'s resolution; returns ``(image, masks)``."""
    if geom.kind == "bscan":
        return _render_bscan(geom, spec)
    return _render_fundus(replace(geom, kind=spec.kind if spec.kind != "bscan" else geom.kind), spec)


def gen_phantom(spec: PhantomSpec, seed: int, patient_id: str | None = None) -> PhantomSample:
    rng = np.random.default_rng(seed)
    geom = sample_geometry(spec, rng)
    img, masks = render(geom, spec)
    return PhantomSample(img, masks, patient_id or f"P{seed:010d}", geom, spec)


def rerender(sample: PhantomSample, spec: PhantomSpec | None = None, geometry: Geometry | None = None) -> PhantomSample:
    spec = spec or sample.spec
    geom = geometry or sample.geometry
    if spec.kind != "bscan":
        geom = replace(geom, kind=spec.kind)
    img, masks = render(geom, spec)
    return PhantomSample(img, masks, sample.patient_id, geom, spec)


FOLLOWUP_CATEGORIES = ("stable", "recovery", "progression")


def followup_geometry(geom: Geometry, category: str, delta_t: float, growth: float = 0.1) -> Geometry:
    if category not in FOLLOWUP_CATEGORIES:
        raise ValueError(f"unknown follow-up category {category!r}")
    if delta_t < 0:
        raise ValueError("delta_t must be >= 0")
    if category == "stable":
        return geom
    if category == "progression":
        s = 1.0 + growth * delta_t
        return replace(geom, lesions=tuple(l.scaled(s) for l in geom.lesions), hole_width=geom.hole_width * s)
    s = max(0.0, 1.0 - growth * delta_t)
    closure = min(max(delta_t / 6.0, 0.0), 1.0)
    return replace(geom, lesions=tuple(l.scaled(s) for l in geom.lesions), hole_width=geom.hole_width * (1.0 - closure))


def change_region(sample: PhantomSample) -> np.ndarray:
    m = sample.masks["lesions"].astype(bool)
    if "hole" in sample.masks:
        m = m | sample.masks["hole"].astype(bool)
    return m


def gen_followup(sample: PhantomSample, category: str, delta_t: float, growth: float = 0.1):
    """Render the follow-up visit; returns ``(image, change_mask)``.

    The change mask is the symmetric difference of the baseline and follow-up
    lesion (and macular hole) masks.
    """
    geom = followup_geometry(sample.geometry, category, delta_t, growth)
    after = rerender(sample, geometry=geom)
    before = rerender(sample)
    change = change_region(before) ^ change_region(after)
    return after.image, change.astype(np.int64)
