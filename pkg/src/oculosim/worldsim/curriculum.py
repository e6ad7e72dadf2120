"""Two-stage curriculum: stage 1, hard-example mining, refinement, stage 2 at higher resolution."""
from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from ..dataforge import AugmentationSpec, augment, lesion_perturb
from ..metrics import score
from .checkpoint import read_checkpoint, write_checkpoint
from .core import sample_batch
from .data import Corpus, record_prompt
from .diffusion import DiffusionSchedule
from .model import ModelConfig, WorldModel
from .optim import TrainConfig, lr_schedule
from .train import Trainer, TrainItem, mine_hard

PHASES = ("stage1", "refine", "stage2")
# hard samples are re-augmented with intensity changes only: geometric scaling would misalign targets
REFINE_AUGMENT = replace(AugmentationSpec(), scale_range=None)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def batch_positions(n: int, batch: int, seed: int, phase: int, local_step: int) -> list[int]:
    """Indices into a length-``n`` pool for one step; each epoch is a fresh seeded permutation.

    A pure function of its arguments, so a resumed run draws the same batches.
    """
    out = []
    start = local_step * batch
    for pos in range(start, start + batch):
        epoch, k = divmod(pos, n)
        perm = np.random.default_rng(_seed(seed, phase, epoch)).permutation(n)
        out.append(int(perm[k]))
    return out


class CurriculumLog:
    """JSON-lines training log; each write is flushed so an interrupted run leaves a valid prefix."""

    def __init__(self, path: Path, keep_lines: int | None = None):
        self.path = Path(path)
        lines = []
        if keep_lines is not None and self.path.exists():
            lines = self.path.read_text().splitlines()[:keep_lines]
        self.path.write_text("".join(line + "\n" for line in lines))
        self.count = len(lines)

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.count += 1


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def smoothed_losses(log: list[dict], window: int = 50, stage: str | None = None) -> list[float]:
    """Means of consecutive non-overlapping ``window``-step blocks of the step losses."""
    losses = [r["loss"] for r in log if "loss" in r and (stage is None or r["stage"] == stage)]
    return [float(np.mean(losses[i:i + window])) for i in range(0, len(losses) - window + 1, window)]


class Curriculum:
    """Stateful driver; the phase at any global step is a pure function of the config and hard set."""

    def __init__(self, corpus: Corpus, cfg: TrainConfig, seed: int, out_dir, model_cfg: ModelConfig | None = None,
                 augment_spec: AugmentationSpec = REFINE_AUGMENT):
        self.corpus = corpus
        self.cfg = cfg
        self.seed = int(seed)
        self.out_dir = Path(out_dir)
        self.model_cfg = model_cfg or ModelConfig()
        self.augment_spec = augment_spec
        self.train_records = sorted(corpus.records("train"), key=lambda r: r.record_id)
        if not self.train_records:
            raise ValueError("curriculum needs a non-empty train split")
        torch.manual_seed(self.seed)
        self.model = WorldModel(self.model_cfg)
        self.schedule = DiffusionSchedule(T=cfg.diffusion_steps)
        self.trainer = Trainer(self.model, cfg, seed=self.seed, schedule=self.schedule)
        self.hard: dict[str, tuple[str, float]] | None = None  # None until mining has run

    # phase layout -------------------------------------------------------
    def refine_pool(self) -> list[tuple[int, bool]]:
        """(train index, is_hard) entries; hard records appear ``hard_weight`` times."""
        pool = []
        for i, r in enumerate(self.train_records):
            reps = self.cfg.hard_weight if r.record_id in self.hard else 1
            pool += [(i, r.record_id in self.hard)] * reps
        return pool

    def refine_steps(self) -> int:
        if not self.hard:
            return 0
        if self.cfg.refine_steps is not None:
            return self.cfg.refine_steps
        return math.ceil(len(self.refine_pool()) / self.cfg.effective_batch)

    def total_steps(self) -> int:
        return self.cfg.stage1_steps + self.refine_steps() + self.cfg.stage2_steps

    def locate(self, step: int) -> tuple[str, int]:
        """(phase, local step) for a global step; refinement needs mining to have run."""
        s1 = self.cfg.stage1_steps
        if step < s1:
            return "stage1", step
        r = self.refine_steps()
        if step < s1 + r:
            return "refine", step - s1
        return "stage2", step - s1 - r

    # batches ------------------------------------------------------------
    def _batch(self, phase: str, local: int) -> list[TrainItem]:
        B = self.cfg.effective_batch
        if phase == "refine":
            pool = self.refine_pool()
            picks = batch_positions(len(pool), B, self.seed, 1, local)
            items = []
            for slot, p in enumerate(picks):
                idx, is_hard = pool[p]
                items.append(self._refine_item(self.train_records[idx], is_hard, _seed(self.seed, 1, local, slot)))
            return items
        res = self.cfg.stage1_resolution if phase == "stage1" else self.cfg.stage2_resolution
        picks = batch_positions(len(self.train_records), B, self.seed, PHASES.index(phase), local)
        return [self.corpus.item(self.train_records[i], res) for i in picks]

    def _refine_item(self, record, is_hard: bool, seed: int) -> TrainItem:
        res = self.cfg.stage1_resolution
        if not is_hard:
            return self.corpus.item(record, res)
        lesion = (self.corpus.mask(record.aux_refs["lesions"], res) if "lesions" in record.aux_refs
                  else np.zeros((res, res), dtype=np.int64))
        conds = []
        for k, ref in enumerate(record.input_refs):
            img = augment(self.corpus.image(ref, res), self.augment_spec, _seed(seed, k))
            conds.append(lesion_perturb(img, lesion, _seed(seed, k, 1)))
        return self.corpus.item(record, res, cond_override=conds)

    # mining -------------------------------------------------------------
    def mine(self, log: CurriculumLog) -> None:
        cfg = self.cfg
        res = cfg.stage1_resolution
        n = min(cfg.mining_samples, len(self.train_records))
        picks = sorted(np.random.default_rng(_seed(self.seed, 99)).choice(len(self.train_records), n, replace=False))
        records = [self.train_records[i] for i in picks]
        rows = []
        self.model.eval()
        mb = cfg.micro_batch
        for start in range(0, n, mb):
            chunk = records[start:start + mb]
            prompts = [record_prompt(r) for r in chunk]
            conds = [[self.corpus.image(ref, res) for ref in r.input_refs] for r in chunk]
            preds = sample_batch(prompts, conds, self.schedule, cfg.mining_sample_steps, self.model, 0,
                                 self.corpus.vocab, seeds=[_seed(self.seed, 98, start + k) for k in range(len(chunk))])
            for r, pred in zip(chunk, preds):
                scores = score(r.target_kind, pred, self.corpus.image(r.target_ref, res))
                rows.append({"id": r.record_id, "task": r.task, **scores})
        self.hard = mine_hard(rows, cfg)
        step = self.trainer.step
        log.write({"event": "mining", "step": step, "evaluated": len(rows), "hard": len(self.hard)})
        for rid in sorted(self.hard):
            metric, value = self.hard[rid]
            log.write({"event": "hard", "step": step, "id": rid, "metric": metric, "value": value})
        if not self.hard:
            log.write({"event": "refine_skipped", "step": step})

    # checkpoints --------------------------------------------------------
    def header(self, log_lines: int) -> dict:
        return {
            "step": self.trainer.step,
            "optimizer_step": self.trainer.step,
            "seed": self.seed,
            "train_config": self.cfg.to_dict(),
            "model_config": self.model_cfg.to_dict(),
            "hard": None if self.hard is None else {k: list(v) for k, v in sorted(self.hard.items())},
            "log_lines": log_lines,
        }

    def save(self, path, log: CurriculumLog) -> None:
        write_checkpoint(path, self.trainer.state_arrays(), self.header(log.count))

    def restore(self, path) -> int:
        arrays, header = read_checkpoint(path)
        if header.get("model_config") != self.model_cfg.to_dict():
            raise ValueError("checkpoint model config differs from the requested one")
        if header.get("train_config") != self.cfg.to_dict() or header.get("seed") != self.seed:
            raise ValueError("checkpoint was written by a run with a different config or seed")
        self.trainer.load_state_arrays(arrays, header["step"], header["optimizer_step"])
        hard = header.get("hard")
        self.hard = None if hard is None else {k: (v[0], float(v[1])) for k, v in hard.items()}
        return int(header["log_lines"])

    # driver -------------------------------------------------------------
    def run(self, resume=None, stop_at: int | None = None, log_name: str = "train_log.jsonl",
            ckpt_name: str = "model.eywk") -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        keep = self.restore(resume) if resume is not None else 0
        log = CurriculumLog(self.out_dir / log_name, keep_lines=keep)
        ckpt = self.out_dir / ckpt_name
        cfg = self.cfg
        while True:
            step = self.trainer.step
            if step == cfg.stage1_steps and self.hard is None:
                self.mine(log)
            if stop_at is not None and step >= stop_at:
                break
            if self.hard is not None and step >= self.total_steps():
                break
            phase, local = self.locate(step)
            batch = self._batch(phase, local)
            lr = lr_schedule(step, cfg)
            loss = self.trainer.train_step(batch)
            log.write({"step": step, "lr": lr, "loss": loss, "stage": phase,
                       **{k: v for k, v in sorted(self.trainer.last_terms.items())}})
            if cfg.checkpoint_every and self.trainer.step % cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"step{self.trainer.step:06d}.eywk", log)
        self.save(ckpt, log)
        return ckpt


def run_curriculum(corpus: Corpus, cfg: TrainConfig, seed: int, out_dir, model_cfg: ModelConfig | None = None,
                   resume=None, stop_at: int | None = None) -> Path:
    """Train through all phases and return the final checkpoint path."""
    return Curriculum(corpus, cfg, seed, out_dir, model_cfg).run(resume=resume, stop_at=stop_at)


def load_model(path) -> tuple[WorldModel, dict]:
    """Rebuild a model from a checkpoint's parameters."""
    arrays, header = read_checkpoint(path)
    model = WorldModel(ModelConfig(**header["model_config"]))
    params = dict(model.named_parameters())
    missing = [n for n in params if f"param.{n}" not in arrays]
    if missing:
        raise ValueError(f"checkpoint lacks parameters {missing[:3]}")
    with torch.no_grad():
        for n, p in params.items():
            p.copy_(torch.as_tensor(arrays[f"param.{n}"]).reshape(p.shape))
    model.eval()
    return model, header
