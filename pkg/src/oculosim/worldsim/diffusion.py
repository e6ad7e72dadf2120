"""DDPM noise schedule and forward / reverse steps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError("need 0 < beta_start <= beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        """``betas[t - 1]`` is beta_t for t = 1..T."""
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @property
    def alpha_bars(self) -> np.ndarray:
        """``alpha_bars[t]`` for t = 0..T, with ``alpha_bars[0] == 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def _ab(self, t, like: torch.Tensor) -> torch.Tensor:
        ab = torch.as_tensor(self.alpha_bars, dtype=like.dtype)[torch.as_tensor(t, dtype=torch.long)]
        return ab.reshape(-1, *([1] * (like.dim() - 1)))

    def q_sample(self, z0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
        ab = self._ab(t, z0)
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise

    def predict_z0(self, z_t: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        ab = self._ab(t, z_t)
        return (z_t - (1 - ab).sqrt() * eps) / ab.sqrt()

    def timesteps(self, steps: int) -> list[int]:
        """Descending, evenly spaced subset of 1..T used by a ``steps``-step sampler."""
        if not 0 <= steps <= self.T:
            raise ValueError(f"steps must lie in [0, {self.T}], got {steps}")
        if steps == 0:
            return []
        ts = np.unique(np.rint(np.linspace(1, self.T, steps)).astype(int))[::-1]
        return [int(t) for t in ts]

    def ancestral_step(self, z_t, t: int, t_prev: int, eps, generator: torch.Generator | None):
        """One DDPM posterior step from ``t`` to ``t_prev`` (< t) given predicted noise."""
        ab = self.alpha_bars
        ab_t, ab_p = ab[t], ab[t_prev]
        beta = 1.0 - ab_t / ab_p
        z0 = self.predict_z0(z_t, torch.full((z_t.shape[0],), t), eps)
        mean = (np.sqrt(ab_p) * beta / (1 - ab_t)) * z0 + (np.sqrt(1 - beta) * (1 - ab_p) / (1 - ab_t)) * z_t
        if t_prev == 0:
            return mean
        var = beta * (1 - ab_p) / (1 - ab_t)
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
        return mean + float(np.sqrt(var)) * noise
