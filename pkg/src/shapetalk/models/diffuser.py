"""Conditional pixel-space denoising diffusion model.

Forward process and the 1-step clean-image recovery follow
``x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps`` with a linear-beta schedule.
The text condition enters a small UNet through one cross-attention block per
level; the text encoder accepts either hard token ids or row-stochastic
token distributions (the soft path is a plain matmul with the embedding
table, so both paths agree exactly on one-hots).
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..tokenizers import PAD
from .layers import CrossAttention, EncoderBlock, init_weights, timestep_embedding
from .naming import GroupedModel


class ScheduleError(Exception):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels ``alpha_bar[t]`` for t in 1..T."""

    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def alpha_bar(self) -> np.ndarray:
        betas = np.linspace(self.beta_start, self.beta_end, self.timesteps)
        return np.cumprod(1.0 - betas)

    def alpha_bar_at(self, t):
        """``alpha_bar`` for integer t (1-based), as a torch tensor."""
        t = torch.as_tensor(t)
        if bool((t < 1).any()) or bool((t > self.timesteps).any()):
            raise ScheduleError(f"timestep out of range 1..{self.timesteps}")
        table = torch.from_numpy(self.alpha_bar)
        return table[t.long() - 1]


def _bcast(a: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return a.reshape(a.shape + (1,) * (like.dim() - a.dim())).to(like.dtype)


def add_noise(schedule: NoiseSchedule, x0, t, eps):
    abar = _bcast(schedule.alpha_bar_at(t), x0)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def one_step_x0(schedule: NoiseSchedule, x_t, t, eps_hat):
    abar = _bcast(schedule.alpha_bar_at(t), x_t)
    return (x_t - (1.0 - abar).sqrt() * eps_hat) / abar.sqrt()


@dataclass(frozen=True)
class DiffuserConfig:
    vocab_size: int = 32
    text_dim: int = 64
    text_len: int = 16
    n_heads: int = 4
    channels: tuple = (32, 64, 128)
    resolution: int = 32
    timesteps: int = 200
    time_dim: int = 64


class TextEncoder(nn.Module):
    """Token embedding + one bidirectional self-attention block."""

    def __init__(self, config: DiffuserConfig):
        super().__init__()
        c = config
        self.emb = nn.Embedding(c.vocab_size, c.text_dim)
        self.pos = nn.Parameter(torch.zeros(c.text_len, c.text_dim))
        self.block = EncoderBlock(c.text_dim, c.n_heads, 2 * c.text_dim)
        self.norm = nn.LayerNorm(c.text_dim)

    def forward(self, ids_or_dists, pad_mask=None):
        if ids_or_dists.dtype in (torch.int32, torch.int64):
            x = self.emb(ids_or_dists)
            if pad_mask is None:
                pad_mask = ids_or_dists != PAD
        else:
            if ids_or_dists.shape[-1] != self.emb.weight.shape[0]:
                raise ValueError(
                    f"distribution width {ids_or_dists.shape[-1]} != "
                    f"vocabulary size {self.emb.weight.shape[0]}"
                )
            x = ids_or_dists @ self.emb.weight
            if pad_mask is None:
                pad_mask = torch.ones(
                    x.shape[:2], dtype=torch.bool, device=x.device
                )
        x = x + self.pos[: x.shape[1]]
        x = self.block(x, pad_mask)
        return self.norm(x), pad_mask


class FilmResBlock(nn.Module):
    """Two 3x3 convs with groupnorm and timestep affine modulation."""

    def __init__(self, ch_in, ch_out, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.film = nn.Linear(time_dim, 2 * ch_out)
        self.skip = (
            nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()
        )

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class SpatialCrossAttention(nn.Module):
    """Cross-attention from flattened feature-map positions to text states."""

    def __init__(self, channels, n_heads, text_dim):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.attn = CrossAttention(channels, n_heads, kv_dim=text_dim)

    def forward(self, x, context, context_mask):
        b, c, h, w = x.shape
        flat = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        out = self.attn(flat, context, context_mask)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class UNetLevel(nn.Module):
    def __init__(self, ch_in, ch_out, time_dim, n_heads, text_dim):
        super().__init__()
        self.res = FilmResBlock(ch_in, ch_out, time_dim)
        self.xattn = SpatialCrossAttention(ch_out, n_heads, text_dim)

    def forward(self, x, temb, context, context_mask):
        return self.xattn(self.res(x, temb), context, context_mask)


class UNet(nn.Module):
    def __init__(self, config: DiffuserConfig):
        super().__init__()
        c = config
        c0, c1, c2 = c.channels
        td = 2 * c.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(c.time_dim, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.stem = nn.Conv2d(3, c0, 3, padding=1)
        self.lvl0 = UNetLevel(c0, c0, td, c.n_heads, c.text_dim)
        self.down0 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.lvl1 = UNetLevel(c1, c1, td, c.n_heads, c.text_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.lvl2 = UNetLevel(c2, c2, td, c.n_heads, c.text_dim)
        self.up1 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.dec1 = FilmResBlock(2 * c1, c1, td)
        self.up0 = nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1)
        self.dec0 = FilmResBlock(2 * c0, c0, td)
        self.out_norm = nn.GroupNorm(8, c0)
        self.out = nn.Conv2d(c0, 3, 3, padding=1)

    def forward(self, x, t, context, context_mask):
        temb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.time_mlp[0].in_features))
        h0 = self.lvl0(self.stem(x), temb, context, context_mask)
        h1 = self.lvl1(self.down0(h0), temb, context, context_mask)
        h2 = self.lvl2(self.down1(h1), temb, context, context_mask)
        u1 = self.dec1(torch.cat([self.up1(h2), h1], dim=1), temb)
        u0 = self.dec0(torch.cat([self.up0(u1), h0], dim=1), temb)
        return self.out(F.silu(self.out_norm(u0)))


class Diffuser(GroupedModel):
    group_prefix = "dif"
    name_rewrites = ((".xattn.attn.", ".xattn."),)

    def __init__(self, config: DiffuserConfig):
        super().__init__()
        self.config = config
        self.schedule = NoiseSchedule(timesteps=config.timesteps)
        self.txt = TextEncoder(config)
        self.unet = UNet(config)
        # learned null condition states for classifier-free guidance
        self.null_cond = nn.Parameter(torch.zeros(config.text_len, config.text_dim))
        # transformer-style init for the text stack only; the UNet keeps the
        # default conv init (a zero-initialized output conv would block all
        # upstream gradients when it is excluded from finetuning)
        init_weights(self.txt)
        nn.init.trunc_normal_(self.txt.pos, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.null_cond, std=0.02, a=-0.04, b=0.04)

    def encode_text(self, ids, pad_mask=None):
        """Hard-token condition states, (B, L, D)."""
        return self.txt(ids, pad_mask)

    def encode_text_soft(self, dists, pad_mask=None):
        """Soft-distribution condition states; differentiable in ``dists``."""
        if dists.dtype in (torch.int32, torch.int64):
            raise TypeError("encode_text_soft expects float distributions")
        return self.txt(dists, pad_mask)

    def null_condition(self, batch: int, dtype=None):
        states = self.null_cond.unsqueeze(0).expand(batch, -1, -1)
        if dtype is not None:
            states = states.to(dtype)
        mask = torch.ones(
            batch, self.config.text_len, dtype=torch.bool, device=states.device
        )
        return states, mask

    def predict_noise(self, x_t, t, cond_states=None, cond_mask=None):
        """Predicted noise for ``x_t`` (B, H, W, 3) at timesteps ``t``."""
        if cond_states is None:
            cond_states, cond_mask = self.null_condition(x_t.shape[0], x_t.dtype)
        # contiguous() drops the channels-last layout the permute produced;
        # torch's channels-last GroupNorm backward is unreliable on CPU
        x = x_t.permute(0, 3, 1, 2).contiguous()
        out = self.unet(x, t, cond_states, cond_mask)
        return out.permute(0, 2, 3, 1)

    def denoise_loss(self, x0, t, eps, cond_states, cond_mask=None):
        """MSE between predicted and true noise on ``add_noise(x0, t, eps)``."""
        x_t = add_noise(self.schedule, x0, t, eps)
        eps_hat = self.predict_noise(x_t, t, cond_states, cond_mask)
        return ((eps_hat - eps) ** 2).mean()

    def loss_hard(self, x0, y_ids, t, eps):
        """Conventional conditional training loss (hard token condition)."""
        states, mask = self.encode_text(y_ids)
        return self.denoise_loss(x0, t, eps, states, mask)

    def loss_soft(self, x0, dists, t, eps, pad_mask=None):
        """Reconstruction loss conditioned on token distributions; gradients
        reach both the denoiser and, through ``dists``, the upstream model."""
        states, mask = self.encode_text_soft(dists, pad_mask)
        return self.denoise_loss(x0, t, eps, states, mask)

    @torch.no_grad()
    def sample(self, cond_ids=None, cond_states=None, cond_mask=None, n=None,
               steps=50, guidance_scale=3.0, rng=None, clip_denoised=True):
        """Ancestral DDPM sampling over an evenly strided sub-schedule.

        Classifier-free guidance mixes conditional and null predictions:
        ``eps = eps_uncond + s * (eps_cond - eps_uncond)``.
        """
        sched = self.schedule
        if steps > sched.timesteps:
            raise ScheduleError(f"steps {steps} > schedule length {sched.timesteps}")
        if cond_states is None:
            if cond_ids is None:
                raise ValueError("either cond_ids or cond_states is required")
            cond_states, cond_mask = self.encode_text(cond_ids)
        b = n or cond_states.shape[0]
        dtype = cond_states.dtype
        res = self.config.resolution
        x = torch.empty(b, res, res, 3, dtype=dtype)
        x.normal_(generator=rng)
        ts = np.unique(np.linspace(1, sched.timesteps, steps).round().astype(int))[::-1]
        abar = sched.alpha_bar
        for i, t in enumerate(ts):
            t_batch = torch.full((b,), int(t), dtype=torch.long)
            if guidance_scale == 1.0:
                eps_hat = self.predict_noise(x, t_batch, cond_states, cond_mask)
            else:
                eps_c = self.predict_noise(x, t_batch, cond_states, cond_mask)
                eps_u = self.predict_noise(x, t_batch)
                eps_hat = eps_u + guidance_scale * (eps_c - eps_u)
            x0_hat = one_step_x0(sched, x, t_batch, eps_hat)
            if clip_denoised:
                x0_hat = x0_hat.clamp(0.0, 1.0)
            if i + 1 < len(ts):
                t_prev = int(ts[i + 1])
                a_t, a_prev = abar[t - 1], abar[t_prev - 1]
                var = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)
                dir_coef = max(1.0 - a_prev - var, 0.0) ** 0.5
                noise = torch.empty_like(x).normal_(generator=rng)
                x = (
                    a_prev**0.5 * x0_hat
                    + dir_coef * (x - a_t**0.5 * x0_hat) / (1.0 - a_t) ** 0.5
                    + var**0.5 * noise
                )
            else:
                x = x0_hat
        return x.clamp(0.0, 1.0)
