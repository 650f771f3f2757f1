"""Encoder-decoder autoregressive captioner.

A patch-embedding image encoder feeds a causally masked text decoder through
cross-attention. Teacher-forced forward passes return the full sequence of
token distributions, which is what crosses into the diffuser during joint
training.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..tokenizers import BOS, EOS, PAD
from .layers import CrossAttention, EncoderBlock, Mlp, SelfAttention, init_weights
from .naming import GroupedModel

LOG_EPS = 1e-12


@dataclass(frozen=True)
class CaptionerConfig:
    vocab_size: int = 96
    dim: int = 64
    n_heads: int = 4
    mlp_dim: int = 128
    enc_depth: int = 2
    dec_depth: int = 2
    patch: int = 4
    resolution: int = 32
    max_len: int = 16
    min_len: int = 3


class DecoderBlock(nn.Module):
    def __init__(self, dim, n_heads, mlp_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.sattn = SelfAttention(dim, n_heads, causal=True)
        self.norm2 = nn.LayerNorm(dim)
        self.xattn = CrossAttention(dim, n_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_dim)

    def forward(self, x, memory):
        x = x + self.sattn(self.norm1(x))
        x = x + self.xattn(self.norm2(x), memory)
        return x + self.mlp(self.norm3(x))


class Captioner(GroupedModel):
    group_prefix = "cap"
    name_rewrites = (
        (".attn.qkv", ".qkv"),
        (".attn.proj", ".attn_out"),
    )

    def __init__(self, config: CaptionerConfig):
        super().__init__()
        self.config = config
        c = config
        n_patches = (c.resolution // c.patch) ** 2
        self.patch_proj = nn.Linear(3 * c.patch * c.patch, c.dim)
        self.pos_enc = nn.Parameter(torch.zeros(n_patches, c.dim))
        self.pos_dec = nn.Parameter(torch.zeros(c.max_len, c.dim))
        self.tok_emb = nn.Embedding(c.vocab_size, c.dim)
        self.enc = nn.ModuleList(
            EncoderBlock(c.dim, c.n_heads, c.mlp_dim) for _ in range(c.enc_depth)
        )
        self.dec = nn.ModuleList(
            DecoderBlock(c.dim, c.n_heads, c.mlp_dim) for _ in range(c.dec_depth)
        )
        self.enc_norm = nn.LayerNorm(c.dim)
        self.out_norm = nn.LayerNorm(c.dim)
        init_weights(self)
        nn.init.trunc_normal_(self.pos_enc, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.pos_dec, std=0.02, a=-0.04, b=0.04)

    def _patchify(self, images: torch.Tensor) -> torch.Tensor:
        # images: (B, H, W, 3) in [0, 1]
        p = self.config.patch
        b, h, w, _ = images.shape
        if h != self.config.resolution or w != self.config.resolution:
            raise ValueError(
                f"image resolution {h}x{w} != trained {self.config.resolution}"
            )
        x = images.reshape(b, h // p, p, w // p, p, 3)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * 3)
        return x

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_proj(self._patchify(images)) + self.pos_enc
        for block in self.enc:
            x = block(x)
        return self.enc_norm(x)

    def _decode_logits(self, tokens: torch.Tensor, memory: torch.Tensor):
        # tokens: (B, L_in) token ids starting with BOS
        x = self.tok_emb(tokens) + self.pos_dec[: tokens.shape[1]]
        for block in self.dec:
            x = block(x, memory)
        return self.out_norm(x) @ self.tok_emb.weight.T  # tied output head

    def forward(self, images: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Teacher-forced token distributions, shape (B, L, V).

        Row ``t`` is the distribution over token ``t`` given ``y[:t]`` and
        the image; row 0 is a constant [BOS] one-hot.
        """
        if y.shape[1] != self.config.max_len:
            raise ValueError(f"sequence length {y.shape[1]} != {self.config.max_len}")
        memory = self.encode_image(images)
        logits = self._decode_logits(y[:, :-1], memory)
        dists = F.softmax(logits, dim=-1)
        bos_row = torch.zeros_like(dists[:, :1])
        bos_row[:, 0, BOS] = 1.0
        return torch.cat([bos_row, dists], dim=1)

    @torch.no_grad()
    def generate(self, images, strategy="greedy", rng=None, p=0.9, k=10,
                 temperature=0.7, beam=3):
        """Autoregressive decoding; returns (B, max_len) id tensor."""
        if strategy == "top_p" and not 0.0 < p <= 1.0:
            raise ValueError(f"top_p parameter p={p} outside (0, 1]")
        if strategy == "top_k" and k < 1:
            raise ValueError(f"top_k parameter k={k} must be >= 1")
        if strategy == "tempered" and temperature <= 0:
            raise ValueError(f"temperature {temperature} must be > 0")
        if strategy == "beam" and beam < 1:
            raise ValueError(f"beam width {beam} must be >= 1")
        if strategy not in ("greedy", "top_p", "top_k", "tempered", "beam"):
            raise ValueError(f"unknown decoding strategy {strategy!r}")
        if strategy == "beam":
            return self._beam_search(images, beam)
        memory = self.encode_image(images)
        b = images.shape[0]
        tokens = torch.full((b, 1), BOS, dtype=torch.long, device=images.device)
        finished = torch.zeros(b, dtype=torch.bool)
        for step in range(1, self.config.max_len):
            logits = self._decode_logits(tokens, memory)[:, -1]
            logits = self._mask_specials(logits, step)
            next_id = self._pick(logits, strategy, rng, p, k, temperature)
            next_id = torch.where(finished, torch.full_like(next_id, PAD), next_id)
            tokens = torch.cat([tokens, next_id[:, None]], dim=1)
            finished |= next_id == EOS
            if bool(finished.all()):
                break
        return self._finalize(tokens)

    def _mask_specials(self, logits, step):
        logits = logits.clone()
        logits[:, PAD] = float("-inf")
        logits[:, BOS] = float("-inf")
        # sequence must reach min_len tokens including BOS/EOS
        if step < self.config.min_len - 1:
            logits[:, EOS] = float("-inf")
        return logits

    @staticmethod
    def _pick(logits, strategy, rng, p, k, temperature):
        if strategy == "greedy":
            return logits.argmax(dim=-1)
        if strategy == "tempered":
            logits = logits / temperature
        probs = F.softmax(logits, dim=-1)
        if strategy == "top_p":
            sorted_p, order = probs.sort(dim=-1, descending=True)
            cum = sorted_p.cumsum(dim=-1)
            keep = cum - sorted_p < p  # smallest nucleus covering mass p
            sorted_p = sorted_p * keep
            pick = torch.multinomial(sorted_p, 1, generator=rng)
            return order.gather(-1, pick).squeeze(-1)
        if strategy == "top_k":
            top_p_vals, top_idx = probs.topk(min(k, probs.shape[-1]), dim=-1)
            pick = torch.multinomial(top_p_vals, 1, generator=rng)
            return top_idx.gather(-1, pick).squeeze(-1)
        return torch.multinomial(probs, 1, generator=rng).squeeze(-1)

    def _beam_search(self, images, beam):
        memory = self.encode_image(images)
        b = images.shape[0]
        results = []
        for i in range(b):
            mem = memory[i : i + 1]
            beams = [(0.0, [BOS], False)]
            for step in range(1, self.config.max_len):
                live = [bm for bm in beams if not bm[2]]
                done = [bm for bm in beams if bm[2]]
                if not live:
                    break
                tokens = torch.tensor([bm[1] for bm in live], dtype=torch.long)
                logits = self._decode_logits(tokens, mem.expand(len(live), -1, -1))[:, -1]
                logp = F.log_softmax(self._mask_specials(logits, step), dim=-1)
                candidates = list(done)
                for bi, (score, seq, _) in enumerate(live):
                    top_lp, top_id = logp[bi].topk(beam)
                    for lp, tid in zip(top_lp.tolist(), top_id.tolist()):
                        candidates.append((score + lp, seq + [tid], tid == EOS))
                candidates.sort(key=lambda bm: (-bm[0], bm[1]))
                beams = candidates[:beam]
                if all(bm[2] for bm in beams):
                    break
            best = max(beams, key=lambda bm: bm[0])
            results.append(best[1])
        out = torch.full((b, self.config.max_len), PAD, dtype=torch.long)
        for i, seq in enumerate(results):
            if seq[-1] != EOS and len(seq) < self.config.max_len:
                seq = seq + [EOS]
            out[i, : len(seq)] = torch.tensor(seq[: self.config.max_len])
        return self._finalize(out)

    def _finalize(self, tokens):
        out = torch.full(
            (tokens.shape[0], self.config.max_len), PAD, dtype=torch.long,
            device=tokens.device,
        )
        out[:, : tokens.shape[1]] = tokens
        # unterminated max-length sequences get EOS stamped on the last slot
        no_eos = (out == EOS).sum(dim=1) == 0
        out[no_eos, -1] = EOS
        return out


def caption_loss(dists: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of gold tokens over non-pad positions.

    The BOS row (t=0) is excluded; EOS positions count.
    """
    gold = dists.gather(-1, y.unsqueeze(-1)).squeeze(-1).clamp_min(LOG_EPS)
    mask = (y != PAD).float()
    mask[:, 0] = 0.0
    total = mask.sum()
    if total == 0:
        return dists.sum() * 0.0
    return -(gold.log() * mask).sum() / total
