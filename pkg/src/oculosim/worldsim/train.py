"""Loss, AdamW training steps with gradient accumulation, gradient checking and hard-example mining."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import kl_standard_normal
from .diffusion import DiffusionSchedule
from .model import WorldModel
from .optim import TrainConfig, lr_schedule, make_optimizer

SEGMENTATION_TASKS = ("segment", "detect")
GENERATIVE_TASKS = ("translate", "enhance", "sr", "inpaint", "outpaint", "progress")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainItem:
    """One training example already converted to tensors.

    ``segments`` holds token-id lists and ``ImageRef`` entries indexing ``cond``.
    """

    record_id: str
    task: str
    segments: list
    cond: list[torch.Tensor]
    target: torch.Tensor
    structure_ref: int = 0
    lesion_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def model_loss(model: WorldModel, items: list[TrainItem], schedule: DiffusionSchedule, cfg: TrainConfig,
               generator: torch.Generator, stop_latent_grad: bool = True) -> tuple[torch.Tensor, dict]:
    """Noise-prediction MSE plus the VAE reconstruction / KL term for a micro-batch.

    Training detaches the latents fed to the denoiser (``stop_latent_grad``);
    gradient checks turn this off so backprop and finite differences see the
    same function.
    """
    dt = next(model.parameters()).dtype
    b = len(items)
    targets = torch.stack([it.target.to(dt) for it in items])
    structs = torch.stack([it.cond[it.structure_ref].to(dt) for it in items])
    x = torch.cat([targets, structs])
    mu, logvar = model.vae.encode(x)
    xi = torch.randn(mu.shape, generator=generator, dtype=dt)
    recon = model.vae.decode_raw(mu + (0.5 * logvar).exp() * xi)
    vae_term = F.mse_loss(recon, x) + cfg.kl_weight * kl_standard_normal(mu, logvar)

    lat = mu.detach() if stop_latent_grad else mu
    z0, z_struc = lat[:b], lat[b:]
    if model.cfg.residual:
        z0 = z0 - z_struc
    # stratified timesteps: one draw per equal-width bin keeps the micro-batch loss less noisy
    u = torch.rand(b, generator=generator, dtype=torch.float64)
    t = ((torch.arange(b, dtype=torch.float64) + u) * schedule.T / b).long().clamp(0, schedule.T - 1) + 1
    noise = torch.randn(z0.shape, generator=generator, dtype=dt)
    z_t = schedule.q_sample(z0, t, noise)
    c_sem, key_pad = model.semantic([it.segments for it in items], [[c.to(dt) for c in it.cond] for it in items])
    eps = model.denoiser(z_t, t, c_sem, key_pad, z_struc)
    diff_term = F.mse_loss(eps, noise)
    loss = cfg.diffusion_weight * diff_term + cfg.vae_weight * vae_term
    return loss, {"diffusion": diff_term.item(), "vae": vae_term.item()}


def step_generator(seed: int, step: int, micro: int) -> torch.Generator:
    ss = np.random.SeedSequence([seed, step, micro])
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


class Trainer:
    """Owns the model, its AdamW state and the global step counter."""

    def __init__(self, model: WorldModel, cfg: TrainConfig, seed: int = 0, schedule: DiffusionSchedule | None = None):
        self.model = model
        self.cfg = cfg
        self.seed = seed
        self.schedule = schedule or DiffusionSchedule(T=cfg.diffusion_steps)
        self.optimizer = make_optimizer(model.parameters(), cfg)
        self.step = 0

    def train_step(self, batch: list[TrainItem]) -> float:
        """One optimizer update over ``batch`` using micro-batches; returns the mean loss."""
        if not batch:
            raise ValueError("empty batch")
        lr = lr_schedule(self.step, self.cfg)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.model.train()
        self.optimizer.zero_grad(set_to_none=False)
        mb = self.cfg.micro_batch
        chunks = [batch[i:i + mb] for i in range(0, len(batch), mb)]
        total = 0.0
        parts: dict = {}
        for k, chunk in enumerate(chunks):
            loss, terms = model_loss(self.model, chunk, self.schedule, self.cfg, step_generator(self.seed, self.step, k))
            weight = len(chunk) / len(batch)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {self.step} (micro-batch {k}, lr {lr:.3g}): {terms}; "
                    f"records {[it.record_id for it in chunk]}")
            (loss * weight).backward()
            total += loss.item() * weight
            for name, v in terms.items():
                parts[name] = parts.get(name, 0.0) + v * weight
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        self.step += 1
        self.last_terms = parts
        return total

    def state_arrays(self) -> dict[str, torch.Tensor]:
        """Named parameters followed by their AdamW moments."""
        out = {f"param.{n}": p.detach() for n, p in self.model.named_parameters()}
        for n, p in self.model.named_parameters():
            st = self.optimizer.state.get(p, {})
            out[f"adam_m.{n}"] = st.get("exp_avg", torch.zeros_like(p)).detach()
            out[f"adam_v.{n}"] = st.get("exp_avg_sq", torch.zeros_like(p)).detach()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int, optimizer_step: int) -> None:
        params = dict(self.model.named_parameters())
        with torch.no_grad():
            for n, p in params.items():
                p.copy_(torch.as_tensor(arrays[f"param.{n}"], dtype=p.dtype).reshape(p.shape))
        for n, p in params.items():
            if optimizer_step > 0:
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(optimizer_step)),
                    "exp_avg": torch.as_tensor(arrays[f"adam_m.{n}"], dtype=p.dtype).reshape(p.shape).clone(),
                    "exp_avg_sq": torch.as_tensor(arrays[f"adam_v.{n}"], dtype=p.dtype).reshape(p.shape).clone(),
                }
        self.step = step


def train_vae(vae: torch.nn.Module, images, cfg: TrainConfig, steps: int, seed: int = 0) -> list[float]:
    """Codec-only training on reconstruction + KL with the main optimizer settings.

    ``images`` is a list of ``(C, H, W)`` tensors. Batches are seeded draws of
    ``cfg.effective_batch`` images. Returns the reconstruction MSE per step.
    """
    if not images:
        raise ValueError("no images to train on")
    data = torch.stack(list(images)).to(next(vae.parameters()).dtype)
    opt = make_optimizer(vae.parameters(), cfg)
    history = []
    vae.train()
    for step in range(steps):
        for g in opt.param_groups:
            g["lr"] = lr_schedule(step, cfg)
        gen = step_generator(seed, step, 0)
        x = data[torch.randint(len(data), (min(cfg.effective_batch, len(data)),), generator=gen)]
        mu, logvar = vae.encode(x)
        recon = vae.decode_raw(mu + (0.5 * logvar).exp() * torch.randn(mu.shape, generator=gen, dtype=x.dtype))
        mse = F.mse_loss(recon, x)
        loss = mse + cfg.kl_weight * kl_standard_normal(mu, logvar)
        opt.zero_grad(set_to_none=False)
        loss.backward()
        opt.step()
        history.append(mse.item())
    return history


def grad_check(module: torch.nn.Module, loss_fn, epsilon: float = 1e-4, per_group: int = 20, seed: int = 0):
    """Compare backprop gradients with central differences on sampled entries.

    ``loss_fn()`` must be deterministic and evaluate ``module`` in double
    precision. Returns ``(max_rel_err, {param_name: max_rel_err})``.
    """
    params = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if not params:
        return 0.0, {}
    if any(p.dtype != torch.float64 for _, p in params):
        raise ValueError("grad_check needs a float64 module")
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in params}
    rng = np.random.default_rng(seed)
    report = {}
    with torch.no_grad():
        for n, p in params:
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(per_group, flat.numel()), replace=False)
            worst = 0.0
            for i in idx:
                orig = float(flat[i])
                flat[i] = orig + epsilon
                lp = float(loss_fn())
                flat[i] = orig - epsilon
                lm = float(loss_fn())
                flat[i] = orig
                fd = (lp - lm) / (2 * epsilon)
                a = float(grads[n].view(-1)[i])
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
            report[n] = worst
    return max(report.values()), report


def mine_hard(rows, cfg: TrainConfig = TrainConfig()) -> dict[str, tuple[str, float]]:
    """Flag rows scoring strictly below the thresholds.

    Rows are mappings with ``id``, ``task`` and metric values. Mask / box tasks
    are hard when dice or miou is below threshold, generative tasks when ssim
    is. Returns ``{id: (metric, value)}`` naming the triggering metric.
    """
    hard = {}
    for row in rows:
        task = row["task"]
        rid = row["id"]
        if task in SEGMENTATION_TASKS or (task == "exemplar" and ("dice" in row or "miou" in row)):
            if task == "detect" and "dice" not in row:
                needed = ("miou",)
            else:
                needed = ("dice", "miou")
            missing = [m for m in needed if m not in row or row[m] is None or math.isnan(row[m])]
            if missing:
                raise KeyError(f"row {rid!r} ({task}) lacks {missing}")
            for m in needed:
                thr = cfg.hard_dice if m == "dice" else cfg.hard_miou
                if row[m] < thr:
                    hard[rid] = (m, float(row[m]))
                    break
        elif task in GENERATIVE_TASKS or task == "exemplar":
            if "ssim" not in row or row["ssim"] is None or math.isnan(row["ssim"]):
                raise KeyError(f"row {rid!r} ({task}) lacks ssim")
            if row["ssim"] < cfg.hard_ssim:
                hard[rid] = ("ssim", float(row["ssim"]))
        else:
            raise KeyError(f"row {rid!r}: unknown task {task!r}")
    return hard
