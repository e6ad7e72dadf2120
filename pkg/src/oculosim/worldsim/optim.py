"""Training configuration, warmup schedule and AdamW construction."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

LR_TARGET = 1e-5
WARMUP_STEPS = 500
WARMUP_START = 1e-18
ADAM_BETAS = (0.9, 0.95)
WEIGHT_DECAY = 0.01
ADAM_EPS = 1e-8
HARD_THRESHOLD = 0.5


@dataclass(frozen=True)
class TrainConfig:
    lr_target: float = LR_TARGET
    warmup_steps: int = WARMUP_STEPS
    warmup_start: float = WARMUP_START
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    weight_decay: float = WEIGHT_DECAY
    eps: float = ADAM_EPS
    effective_batch: int = 64
    micro_batch: int = 16
    stage1_resolution: int = 32
    stage2_resolution: int = 64
    stage1_steps: int = 200
    refine_steps: int | None = None  # None: one pass over the hard-weighted train set
    stage2_steps: int = 50
    hard_dice: float = HARD_THRESHOLD
    hard_miou: float = HARD_THRESHOLD
    hard_ssim: float = HARD_THRESHOLD
    hard_weight: int = 2
    kl_weight: float = 1e-3
    vae_weight: float = 1.0
    diffusion_weight: float = 1.0
    diffusion_steps: int = 200
    mining_samples: int = 64
    mining_sample_steps: int = 20
    checkpoint_every: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        for f in ("lr_target", "warmup_start", "effective_batch", "micro_batch", "stage1_resolution", "stage2_resolution", "eps"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.warmup_steps < 0 or self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.stage2_resolution <= self.stage1_resolution:
            raise ValueError("stage2_resolution must exceed stage1_resolution")
        if self.effective_batch % self.micro_batch:
            raise ValueError("effective_batch must be a multiple of micro_batch")

    @property
    def accumulation(self) -> int:
        return self.effective_batch // self.micro_batch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ValueError(f"unknown TrainConfig fields: {sorted(set(d) - known)}")
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Linear warmup from ``warmup_start`` to ``lr_target``, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= cfg.warmup_steps:
        return cfg.lr_target
    return cfg.warmup_start + (cfg.lr_target - cfg.warmup_start) * step / cfg.warmup_steps


def make_optimizer(params, cfg: TrainConfig = TrainConfig()) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr_schedule(0, cfg), betas=(cfg.beta1, cfg.beta2),
                             weight_decay=cfg.weight_decay, eps=cfg.eps, foreach=False)
