"""Transformer building blocks shared by the captioner and the diffuser."""

import math

import torch
import torch.nn.functional as F
from torch import nn


def init_weights(module: nn.Module) -> None:
    """Truncated-normal (std 0.02) weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)


def _attend(q, k, v, n_heads, mask=None):
    """Multi-head scaled dot-product attention.

    q: (B, Lq, D); k, v: (B, Lk, D); mask broadcastable to (B, Lq, Lk) with
    True = attend.
    """
    b, lq, d = q.shape
    lk = k.shape[1]
    hd = d // n_heads
    q = q.view(b, lq, n_heads, hd).transpose(1, 2)
    k = k.view(b, lk, n_heads, hd).transpose(1, 2)
    v = v.view(b, lk, n_heads, hd).transpose(1, 2)
    scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
    if mask is not None:
        scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
    attn = F.softmax(scores, dim=-1)
    out = attn @ v
    return out.transpose(1, 2).reshape(b, lq, d)


class SelfAttention(nn.Module):
    def __init__(self, dim, n_heads, causal=False):
        super().__init__()
        self.n_heads = n_heads
        self.causal = causal
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, pad_mask=None):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        lq = x.shape[1]
        mask = None
        if self.causal:
            mask = torch.ones(lq, lq, dtype=torch.bool, device=x.device).tril()
            mask = mask.unsqueeze(0)
        if pad_mask is not None:
            key_mask = pad_mask.unsqueeze(1)  # (B, 1, Lk)
            mask = key_mask if mask is None else mask & key_mask
        return self.proj(_attend(q, k, v, self.n_heads, mask))


class CrossAttention(nn.Module):
    """Cross-attention with a separately addressable query projection."""

    def __init__(self, dim, n_heads, kv_dim=None):
        super().__init__()
        self.n_heads = n_heads
        kv_dim = kv_dim or dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context, context_mask=None):
        mask = context_mask.unsqueeze(1) if context_mask is not None else None
        out = _attend(self.q(x), self.k(context), self.v(context), self.n_heads, mask)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-LN self-attention + MLP block."""

    def __init__(self, dim, n_heads, mlp_dim, causal=False):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads, causal=causal)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_dim)

    def forward(self, x, pad_mask=None):
        x = x + self.attn(self.norm1(x), pad_mask)
        return x + self.mlp(self.norm2(x))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0):
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
