"""Feature-space metrics: perceptual distance, Frechet distance, Inception score.

The pretrained networks usually behind these metrics are replaced by a
deterministic Gaussian-pyramid gradient extractor; anything implementing
:class:`FeatureExtractor` can be swapped in.
"""
from __future__ import annotations

import math
from typing import Protocol

import numpy as np
from scipy import ndimage

from ..imagecore import as_image

LEVELS = 3
# luminance + responses at 0, 45, 90 and 135 degrees
N_CHANNELS = 5


class FeatureExtractor(Protocol):
    dim: int

    def extract(self, img) -> np.ndarray: ...

    def classify(self, img) -> np.ndarray: ...

    def feature_maps(self, img) -> list[np.ndarray]: ...


def _oriented(g: np.ndarray) -> list[np.ndarray]:
    p = np.pad(g, 1, mode="edge")
    c = p[1:-1, 1:-1]
    return [
        p[1:-1, 2:] - c,
        (p[2:, 2:] - c) / math.sqrt(2),
        p[2:, 1:-1] - c,
        (p[2:, :-2] - c) / math.sqrt(2),
    ]


class PyramidExtractor:
    """Luminance and oriented-gradient maps on a 3-level Gaussian pyramid."""

    def __init__(self, levels: int = LEVELS, n_classes: int = 10, seed: int = 0):
        self.levels = levels
        self.n_classes = n_classes
        self.dim = levels * N_CHANNELS * 2
        rng = np.random.default_rng(seed)
        self._proj = rng.normal(0, 1, (n_classes, self.dim))
        self._scale = 8.0

    def pyramid(self, img) -> list[np.ndarray]:
        g = as_image(img).mean(axis=2)
        out = [g]
        for _ in range(self.levels - 1):
            g = ndimage.gaussian_filter(g, 1.0, mode="reflect")[::2, ::2]
            out.append(g)
        return out

    def feature_maps(self, img) -> list[np.ndarray]:
        """Per level, an ``(h, w, 5)`` map with each pixel's vector scaled to unit length."""
        maps = []
        for g in self.pyramid(img):
            f = np.stack([g] + _oriented(g), axis=-1)
            norm = np.sqrt((f * f).sum(axis=-1, keepdims=True))
            maps.append(f / (norm + 1e-10))
        return maps

    def extract(self, img) -> np.ndarray:
        feats = []
        for g in self.pyramid(img):
            f = np.stack([g] + [np.abs(o) for o in _oriented(g)], axis=-1)
            feats += [f.mean(axis=(0, 1)), f.std(axis=(0, 1))]
        return np.concatenate(feats)

    def classify(self, img) -> np.ndarray:
        logits = self._scale * self._proj @ self.extract(img)
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()


DEFAULT_EXTRACTOR = PyramidExtractor()


def perceptual_distance(a, b, fx: FeatureExtractor | None = None) -> float:
    """Mean over pyramid levels of the mean squared unit-feature difference."""
    fx = fx or DEFAULT_EXTRACTOR
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    fa, fb = fx.feature_maps(a), fx.feature_maps(b)
    return float(np.mean([np.mean(np.sum((x - y) ** 2, axis=-1)) for x, y in zip(fa, fb)]))


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition, negative eigenvalues clamped."""
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(feats_a, feats_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    sa = psd_sqrt(cov_a)
    cross = psd_sqrt(sa @ cov_b @ sa)
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2 * cross))
    return max(d, 0.0)


def fid(images_a, images_b, fx: FeatureExtractor | None = None) -> float:
    fx = fx or DEFAULT_EXTRACTOR
    return frechet_distance([fx.extract(x) for x in images_a], [fx.extract(x) for x in images_b])


def inception_score(probs) -> float:
    """``exp(mean_x KL(p(y|x) || p(y)))`` over rows of class probabilities."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("every probability vector must be non-negative and sum to 1")
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(math.exp(terms.sum(axis=1).mean()))
