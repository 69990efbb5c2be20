"""Pattern extractor (parallel cross/self attention) and pattern discriminator."""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, key_mask: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-head attention: softmax(Q K^T / sqrt(d)) V.

    q is (..., m, d); k and v are (..., n, d). key_mask (..., n) marks valid
    keys; masked keys get zero weight. Returns (output, weights).
    """
    if k.shape[-2] == 0:
        raise ValueError("attention requires at least one key")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(
            f"incompatible attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}"
        )
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[..., None, :], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    return weights @ v, weights


class CrossAttention(nn.Module):
    """Cross-attention with its own query/key/value projection matrices."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)

    def forward(
        self, query_seq: torch.Tensor, kv_seq: torch.Tensor, key_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if query_seq.shape[-1] != kv_seq.shape[-1]:
            raise ValueError("query and key/value embeddings must share the model dimension")
        return scaled_dot_attention(
            self.w_q(query_seq), self.w_k(kv_seq), self.w_v(kv_seq), key_mask
        )


class ConcatSelfAttention(nn.Module):
    """Self-attention over the time-concatenated audio and text embeddings."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)

    def forward(
        self,
        e_audio: torch.Tensor,
        e_text: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        if e_audio.shape[-1] != e_text.shape[-1]:
            raise ValueError("audio and text embeddings must share the model dimension")
        e_cat = torch.cat([e_audio, e_text], dim=-2)
        return scaled_dot_attention(self.w_q(e_cat), self.w_k(e_cat), self.w_v(e_cat), mask)


class FusionOutput(NamedTuple):
    e_cross_t: torch.Tensor     # (..., T_t, d), text as query
    e_cross_a: torch.Tensor     # (..., T_a, d), audio as query
    e_self: torch.Tensor        # (..., T_a + T_t, d)
    affinity: torch.Tensor      # (..., T_a, T_t): transposed text-query attention map


class PatternExtractor(nn.Module):
    """Two cross-attention modules and one self-attention module in parallel.

    The text-query attention map, transposed to audio-by-text, doubles as the
    affinity matrix for the alignment loss; its columns sum to one because the
    original map is row-stochastic over audio keys.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.cross_text = CrossAttention(dim)   # query: text, key/value: audio
        self.cross_audio = CrossAttention(dim)  # query: audio, key/value: text
        self.self_attn = ConcatSelfAttention(dim)

    def forward(
        self,
        e_audio: torch.Tensor,
        e_text: torch.Tensor,
        audio_mask: torch.Tensor | None = None,
        text_mask: torch.Tensor | None = None,
    ) -> FusionOutput:
        e_cross_t, w_t = self.cross_text(e_text, e_audio, audio_mask)
        e_cross_a, _ = self.cross_audio(e_audio, e_text, text_mask)
        cat_mask = None
        if audio_mask is not None and text_mask is not None:
            cat_mask = torch.cat([audio_mask, text_mask], dim=-1)
        e_self, _ = self.self_attn(e_audio, e_text, cat_mask)
        return FusionOutput(e_cross_t, e_cross_a, e_self, w_t.transpose(-2, -1))


def masked_max_pool(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Coordinatewise max over time; padded steps are excluded via -inf."""
    if mask is not None:
        x = x.masked_fill(~mask[..., None], float("-inf"))
    return x.max(dim=-2).values


class PatternDiscriminator(nn.Module):
    """Max-pool each attention output over time, concatenate, FC, sigmoid."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc = nn.Linear(3 * dim, 1)

    def forward(
        self,
        fusion: FusionOutput,
        audio_mask: torch.Tensor | None = None,
        text_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        cat_mask = None
        if audio_mask is not None and text_mask is not None:
            cat_mask = torch.cat([audio_mask, text_mask], dim=-1)
        e_cat = torch.cat(
            [
                masked_max_pool(fusion.e_cross_t, text_mask),
                masked_max_pool(fusion.e_cross_a, audio_mask),
                masked_max_pool(fusion.e_self, cat_mask),
            ],
            dim=-1,
        )
        return torch.sigmoid(self.fc(e_cat).squeeze(-1))
