"""Toy latent world model: semantic encoder, VAE codec and conditional denoiser."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .text import DEFAULT_VOCAB, ImageRef


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = len(DEFAULT_VOCAB)
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    patch: int = 4
    image_channels: int = 3
    latent_channels: int = 4
    stride: int = 4
    vae_width: int = 16
    unet_width: int = 48
    time_dim: int = 64
    # diffuse z0 - z_struc instead of z0; unchanged regions become the zero target
    residual: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoid(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=positions.dtype, device=positions.device) / half)
    ang = positions[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class Attention(nn.Module):
    """Multi-head attention. The key projection has no bias: softmax would cancel it."""

    def __init__(self, dim: int, ctx_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(ctx_dim, dim, bias=False)
        self.v = nn.Linear(ctx_dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, ctx, key_pad=None):
        b, n, d = x.shape
        m = ctx.shape[1]
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(ctx).view(b, m, h, d // h).transpose(1, 2)
        v = self.v(ctx).view(b, m, h, d // h).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        if key_pad is not None:
            att = att.masked_fill(key_pad[:, None, None, :], float("-inf"))
        out = att.softmax(dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x, key_pad=None):
        y = self.ln1(x)
        x = x + self.attn(y, y, key_pad)
        return x + self.mlp(self.ln2(x))


class SemanticEncoder(nn.Module):
    """Interleaved text tokens and image patches through a small pre-norm transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.patch = nn.Linear(cfg.image_channels * cfg.patch * cfg.patch, cfg.d_model)
        self.kind = nn.Embedding(2, cfg.d_model)
        self.blocks = nn.ModuleList([Block(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_blocks)])
        self.ln = nn.LayerNorm(cfg.d_model)

    def patchify(self, img: torch.Tensor) -> torch.Tensor:
        c, h, w = img.shape
        p = self.cfg.patch
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
        x = img.reshape(c, h // p, p, w // p, p).permute(1, 3, 0, 2, 4)
        return x.reshape((h // p) * (w // p), c * p * p)

    def embed(self, segments, images) -> torch.Tensor:
        parts = []
        for s in segments:
            if isinstance(s, ImageRef):
                parts.append(self.patch(self.patchify(images[s.index])) + self.kind.weight[1])
            else:
                ids = torch.as_tensor(s, dtype=torch.long)
                parts.append(self.tok(ids) + self.kind.weight[0])
        if not parts:
            raise ValueError("empty segment list")
        x = torch.cat(parts, dim=0)
        pos = torch.arange(x.shape[0], dtype=x.dtype)
        return x + sinusoid(pos, self.cfg.d_model)

    def forward(self, batch_segments, batch_images):
        """Returns ``(c_sem, key_pad)`` with ``c_sem`` of shape ``(B, K, d_model)``."""
        seqs = [self.embed(s, im) for s, im in zip(batch_segments, batch_images)]
        lens = [x.shape[0] for x in seqs]
        x = nn.utils.rnn.pad_sequence(seqs, batch_first=True)
        key_pad = torch.arange(x.shape[1])[None, :] >= torch.tensor(lens)[:, None]
        for blk in self.blocks:
            x = blk(x, key_pad)
        return self.ln(x), key_pad


class VAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.stride != 4:
            raise ValueError("the codec is built for stride 4")
        c, w, z = cfg.image_channels, cfg.vae_width, cfg.latent_channels
        act = nn.SiLU
        self.encoder = nn.Sequential(
            nn.Conv2d(c, w, 3, padding=1), act(),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1), act(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), act(),
            nn.Conv2d(2 * w, 2 * w, 4, stride=2, padding=1), act(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), act(),
            nn.Conv2d(2 * w, 2 * z, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(z, 2 * w, 3, padding=1), act(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), act(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), act(),
            nn.Conv2d(w, c, 3, padding=1),
        )
        self.stride = cfg.stride

    def encode(self, x: torch.Tensor):
        """``x``: (B, C, H, W) -> ``(mu, logvar)`` each (B, z, H/4, W/4)."""
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(f"image dims {tuple(x.shape[-2:])} are not divisible by stride {self.stride}")
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar.clamp(-20.0, 10.0)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.n1 = nn.GroupNorm(8, cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(tdim, cout)
        self.n2 = nn.GroupNorm(8, cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x)))
        h = h + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    def __init__(self, ch: int, ctx_dim: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, ch)
        self.attn = Attention(ch, ctx_dim, heads)

    def forward(self, x, ctx, key_pad):
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(q, ctx, key_pad)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    """U-shaped noise predictor on latents.

    The structural latent is concatenated to the noisy latent; the semantic
    sequence enters through cross-attention at the bottleneck.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, z, td = cfg.unet_width, cfg.latent_channels, cfg.time_dim
        self.time_dim = td
        self.temb = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.inp = nn.Conv2d(2 * z, c, 3, padding=1)
        self.enc = ResBlock(c, c, td)
        self.down = nn.Conv2d(c, 2 * c, 4, stride=2, padding=1)
        self.mid1 = ResBlock(2 * c, 2 * c, td)
        self.xattn = CrossAttention(2 * c, cfg.d_model, cfg.n_heads)
        self.mid2 = ResBlock(2 * c, 2 * c, td)
        self.up = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec = ResBlock(2 * c, c, td)
        self.out_norm = nn.GroupNorm(8, c)
        self.out = nn.Conv2d(c, z, 3, padding=1)

    def forward(self, z_t, t, c_sem, key_pad, z_struc):
        if z_t.shape != z_struc.shape:
            raise ValueError(f"noisy latent {tuple(z_t.shape)} and structural latent {tuple(z_struc.shape)} differ")
        if z_t.shape[-1] % 2 or z_t.shape[-2] % 2:
            raise ValueError("latent grid must have even dims")
        temb = self.temb(sinusoid(t.to(z_t.dtype), self.time_dim))
        h0 = self.enc(self.inp(torch.cat([z_t, z_struc], dim=1)), temb)
        h = self.mid1(self.down(h0), temb)
        h = self.xattn(h, c_sem, key_pad)
        h = self.mid2(h, temb)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec(torch.cat([h, h0], dim=1), temb)
        return self.out(F.silu(self.out_norm(h)))


class WorldModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.semantic = SemanticEncoder(self.cfg)
        self.vae = VAE(self.cfg)
        self.denoiser = Denoiser(self.cfg)
