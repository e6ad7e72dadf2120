"""Run configuration: one JSON file with per-command sections plus CLI overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..imagecore import TASKS
from ..worldsim import ModelConfig, TrainConfig

CATEGORY_PRIORS = {"stable": 0.713, "recovery": 0.163, "progression": 0.123}
SEGMENT_TARGETS = ("optic disc", "optic cup", "vessels", "fovea", "lesions")


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 1."""


def _from_dict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class ForgeConfig:
    size: int = 100
    resolution: int = 64
    records_per_patient: int = 2
    task_mix: dict = field(default_factory=lambda: {
        "segment": 0.3, "detect": 0.1, "translate": 0.1, "enhance": 0.1, "sr": 0.1,
        "inpaint": 0.05, "outpaint": 0.05, "progress": 0.15, "exemplar": 0.05})
    category_priors: dict = field(default_factory=lambda: dict(CATEGORY_PRIORS))
    segment_targets: tuple = SEGMENT_TARGETS
    progress_kinds: tuple = ("bscan", "fundus")
    delta_t_range: tuple = (1, 12)
    lesion_count_range: tuple = (0, 5)
    ratios: tuple = (0.70, 0.15, 0.15)
    tiny_threshold: int = 50

    def __post_init__(self):
        for name in ("segment_targets", "progress_kinds", "delta_t_range", "lesion_count_range", "ratios"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.size < 1 or self.records_per_patient < 1:
            raise ValueError("size and records_per_patient must be >= 1")
        if self.resolution < 32:
            raise ValueError("resolution must be >= 32")
        bad = set(self.task_mix) - set(TASKS)
        if bad:
            raise ValueError(f"unknown tasks in task_mix: {sorted(bad)}")
        if not self.task_mix or any(v < 0 for v in self.task_mix.values()) or sum(self.task_mix.values()) <= 0:
            raise ValueError("task_mix needs non-negative weights with a positive sum")
        if set(self.category_priors) - set(CATEGORY_PRIORS) or any(v < 0 for v in self.category_priors.values()):
            raise ValueError("category_priors keys must be stable/recovery/progression with weights >= 0")
        if set(self.progress_kinds) - {"bscan", "fundus"} or not self.progress_kinds:
            raise ValueError("progress_kinds must be a non-empty subset of bscan/fundus")
        lo, hi = self.delta_t_range
        if not 0 <= lo <= hi:
            raise ValueError("delta_t_range must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class EvalConfig:
    sample_steps: int = 20
    resolution: int | None = None  # default: the checkpoint's stage-2 resolution
    split: str = "test"
    oracle: bool = False
    counterfactual: bool = False
    lesion_dilation: int = 4  # one latent cell (VAE stride)
    max_records: int | None = None
    batch: int = 16


@dataclass(frozen=True)
class ReportConfig:
    bundles: dict = field(default_factory=dict)  # display name -> bundle directory
    group_by: str = "task"

    def __post_init__(self):
        if self.group_by not in ("task", "modality"):
            raise ValueError("group_by must be 'task' or 'modality'")


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    out: str | None = None
    threads: int = 1
    forge: ForgeConfig = field(default_factory=ForgeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    SECTIONS = {"forge": ForgeConfig, "train": TrainConfig, "model": ModelConfig, "eval": EvalConfig,
                "report": ReportConfig}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {"seed", "out", "threads", *cls.SECTIONS}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kw = {k: d[k] for k in ("seed", "out", "threads") if k in d}
        for name, sub in cls.SECTIONS.items():
            if name in d:
                kw[name] = _from_dict(sub, d[name], name)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "out": self.out, "threads": self.threads}
        for name in self.SECTIONS:
            out[name] = asdict(getattr(self, name))
        return out

    def override(self, seed=None, out=None, threads=None) -> "RunConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if out is not None:
            d["out"] = out
        if threads is not None:
            d["threads"] = threads
        return RunConfig.from_dict(d)

    def validated(self) -> "RunConfig":
        """Checks that need the merged config; called before any filesystem access."""
        if self.seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed); there is no implicit entropy")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not self.out:
            raise ConfigError("an output directory is required (config 'out' or --out)")
        if not isinstance(self.threads, int) or self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self
