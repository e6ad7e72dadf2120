"""Image-level entry points into the world model: encode, decode, denoise and sample."""
from __future__ import annotations

import numpy as np
import torch

from ..imagecore import as_image
from .diffusion import DiffusionSchedule
from .model import WorldModel
from .text import DEFAULT_VOCAB, ImageRef, Prompt, Vocab, segment_tokens


def _dtype(model: WorldModel) -> torch.dtype:
    return next(model.parameters()).dtype


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """(H, W, C) image in [0, 1] -> (3, H, W) tensor; grayscale is replicated."""
    arr = as_image(img)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)), dtype=dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    return np.clip(t.detach().to(torch.float64).cpu().numpy().transpose(1, 2, 0), 0.0, 1.0)


def conditioning_sequence(prompt: Prompt, n_images: int) -> list:
    """Prompt segments followed by any conditioning images the prompt does not reference."""
    segs = list(prompt.segments)
    seen = {s.index for s in segs if isinstance(s, ImageRef)}
    segs += [ImageRef(i) for i in range(n_images) if i not in seen]
    return segs


def encode_semantic(model: WorldModel, prompt: Prompt, images, vocab: Vocab = DEFAULT_VOCAB) -> torch.Tensor:
    """``c_sem`` for one prompt: ``(K, d_model)`` hidden states."""
    dt = _dtype(model)
    tens = [to_tensor(im, dt) if not torch.is_tensor(im) else im.to(dt) for im in images]
    segs = segment_tokens(Prompt(prompt.text, conditioning_sequence(prompt, len(tens)), prompt.delta_t,
                                 prompt.structure_ref), vocab)
    with torch.no_grad():
        c_sem, _ = model.semantic([segs], [tens])
    return c_sem[0]


def vae_encode(model: WorldModel, img, seed: int | None = None):
    """Returns ``(z, mu, sigma)`` as (z, h/4, w/4) tensors; ``z = mu`` without a seed."""
    x = to_tensor(img, _dtype(model))[None]
    with torch.no_grad():
        mu, logvar = model.vae.encode(x)
    sigma = (0.5 * logvar).exp()
    if seed is None:
        z = mu
    else:
        g = torch.Generator().manual_seed(seed)
        z = mu + sigma * torch.randn(mu.shape, generator=g, dtype=mu.dtype)
    return z[0], mu[0], sigma[0]


def vae_decode(model: WorldModel, z: torch.Tensor) -> np.ndarray:
    z = torch.as_tensor(z, dtype=_dtype(model))
    if z.dim() != 3 or z.shape[0] != model.cfg.latent_channels:
        raise ValueError(f"latent must be ({model.cfg.latent_channels}, h, w), got {tuple(z.shape)}")
    with torch.no_grad():
        x = model.vae.decode_raw(z[None])[0]
    return to_image(x)


def kl_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean per-element KL(N(mu, sigma^2) || N(0, 1))."""
    return 0.5 * (mu * mu + logvar.exp() - 1.0 - logvar).mean()


def denoise_predict(model: WorldModel, z_t, t, c_sem, z_struc, key_pad=None) -> torch.Tensor:
    """Predicted noise for batched or single latents."""
    single = z_t.dim() == 3
    if single:
        z_t, z_struc, c_sem = z_t[None], z_struc[None], c_sem[None]
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z_t.shape[0])
    if key_pad is None:
        key_pad = torch.zeros(c_sem.shape[:2], dtype=torch.bool)
    out = model.denoiser(z_t, t, c_sem, key_pad, z_struc)
    return out[0] if single else out


def sample(prompt: Prompt, cond_images, schedule: DiffusionSchedule, steps: int, model: WorldModel, seed: int,
           vocab: Vocab = DEFAULT_VOCAB) -> np.ndarray:
    """Ancestral DDPM sampling conditioned on the prompt and its images.

    With ``cfg.residual`` the sampled latent is an offset added to the
    structural latent before decoding.
    """
    return sample_batch([prompt], [cond_images], schedule, steps, model, seed, vocab)[0]


def sample_batch(prompts, cond_lists, schedule: DiffusionSchedule, steps: int, model: WorldModel, seed: int,
                 vocab: Vocab = DEFAULT_VOCAB, seeds=None) -> list[np.ndarray]:
    """Sample several prompts at once; item ``i`` draws its noise from ``seeds[i]`` (default ``seed + i``)."""
    if any(len(c) == 0 for c in cond_lists):
        raise ValueError("sampling needs at least one conditioning image for the structural latent")
    dt = _dtype(model)
    seeds = list(seeds) if seeds is not None else [seed + i for i in range(len(prompts))]
    segs, imgs, structs = [], [], []
    for p, conds in zip(prompts, cond_lists):
        tens = [to_tensor(im, dt) for im in conds]
        full = Prompt(p.text, conditioning_sequence(p, len(tens)), p.delta_t, p.structure_ref)
        segs.append(segment_tokens(full, vocab))
        imgs.append(tens)
        structs.append(tens[p.structure_ref])
    with torch.no_grad():
        c_sem, key_pad = model.semantic(segs, imgs)
        z_struc, _ = model.vae.encode(torch.stack(structs))
        noise = [torch.randn(z_struc.shape[1:], generator=torch.Generator().manual_seed(int(s)), dtype=dt)
                 for s in seeds]
        z = torch.stack(noise)
        ts = schedule.timesteps(steps)
        gens = [torch.Generator().manual_seed(int(s) + 1) for s in seeds]
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps = model.denoiser(z, torch.full((z.shape[0],), t, dtype=torch.long), c_sem, key_pad, z_struc)
            parts = [schedule.ancestral_step(z[k:k + 1], t, t_prev, eps[k:k + 1], gens[k]) for k in range(z.shape[0])]
            z = torch.cat(parts)
        if model.cfg.residual:
            z = z + z_struc
        x = model.vae.decode_raw(z)
    return [to_image(xi) for xi in x]
