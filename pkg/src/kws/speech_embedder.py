"""Conformer-style frame encoder pretrained with phoneme-level CTC.

Supplies hidden states to the audio encoder's first path and frame-level
phoneme predictions for the duration-based alignment target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EmbedderConfig:
    num_layers: int = 6
    model_dim: int = 144
    conv_kernel: int = 3
    attention_heads: int = 4
    subsampling_factor: int = 2
    inventory_size: int = 41
    input_dim: int = 80
    ffn_expansion: int = 4
    dropout: float = 0.1
    rel_pos_window: int = 64

    def __post_init__(self):
        if self.model_dim % self.attention_heads != 0:
            raise ValueError("model_dim must be divisible by attention_heads")
        if self.subsampling_factor < 1:
            raise ValueError("subsampling_factor must be >= 1")

    def output_length(self, num_frames: int) -> int:
        """Frames out for a given frames in: ceil(T / subsampling_factor)."""
        return (num_frames - 1) // self.subsampling_factor + 1


def lengths_to_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    """(B, max_len) boolean mask, True at valid positions."""
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class RelPosSelfAttention(nn.Module):
    """Multi-head self-attention with a clipped relative-position bias per head."""

    def __init__(self, dim: int, heads: int, dropout: float, window: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.window = window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.rel_bias = nn.Parameter(torch.zeros(2 * window + 1, heads))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)

        pos = torch.arange(t, device=x.device)
        rel = (pos[:, None] - pos[None, :]).clamp(-self.window, self.window) + self.window
        scores = scores + self.rel_bias[rel].permute(2, 0, 1)[None]

        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (self.drop(attn) @ v).transpose(1, 2).reshape(b, t, -1)
        return self.out(out)


class ConvModule(nn.Module):
    """Pointwise GLU, depthwise conv, LayerNorm, SiLU, pointwise projection.

    LayerNorm (not BatchNorm) keeps inference independent of batch
    composition, which the batched-scoring contract requires.
    """

    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        y = x.transpose(1, 2)
        y = F.glu(self.pointwise_in(y), dim=1)
        # The pointwise bias makes padded frames nonzero; re-zero them so the
        # depthwise kernel cannot smear padding into the last valid frames.
        y = y * mask[:, None, :]
        y = self.depthwise(y)
        y = self.norm(y.transpose(1, 2)).transpose(1, 2)
        y = self.pointwise_out(F.silu(y))
        return self.drop(y.transpose(1, 2))


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, expansion * dim),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Linear(expansion * dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ConformerBlock(nn.Module):
    """Half-FFN, self-attention, convolution, half-FFN, final LayerNorm."""

    def __init__(self, cfg: EmbedderConfig):
        super().__init__()
        d = cfg.model_dim
        self.ffn1 = FeedForward(d, cfg.ffn_expansion, cfg.dropout)
        self.ffn2 = FeedForward(d, cfg.ffn_expansion, cfg.dropout)
        self.attn = RelPosSelfAttention(d, cfg.attention_heads, cfg.dropout, cfg.rel_pos_window)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.norm_ffn1 = nn.LayerNorm(d)
        self.norm_ffn2 = nn.LayerNorm(d)
        self.norm_attn = nn.LayerNorm(d)
        self.norm_conv = nn.LayerNorm(d)
        self.norm_out = nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = x + 0.5 * self.ffn1(self.norm_ffn1(x))
        x = x + self.drop(self.attn(self.norm_attn(x), mask))
        x = x + self.conv(self.norm_conv(x), mask)
        x = x + 0.5 * self.ffn2(self.norm_ffn2(x))
        x = self.norm_out(x) * mask[:, :, None]
        return x


class SpeechEmbedder(nn.Module):
    """Subsampling conv front-end, conformer blocks, and a phoneme logit head."""

    def __init__(self, cfg: EmbedderConfig):
        super().__init__()
        self.cfg = cfg
        self.subsample = nn.Conv1d(
            cfg.input_dim, cfg.model_dim, kernel_size=3, stride=cfg.subsampling_factor, padding=1
        )
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.num_layers))
        self.head = nn.Linear(cfg.model_dim, cfg.inventory_size)

    def forward(
        self, features: torch.Tensor, lengths: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """features (B, T, input_dim) -> (hidden (B, T_e, D), logits (B, T_e, P), out_lengths)."""
        features = features * lengths_to_mask(lengths, features.shape[1])[:, :, None]
        out_lengths = (lengths - 1) // self.cfg.subsampling_factor + 1
        x = self.subsample(features.transpose(1, 2)).transpose(1, 2)
        mask = lengths_to_mask(out_lengths, x.shape[1])
        x = x * mask[:, :, None]
        for block in self.blocks:
            x = block(x, mask)
        return x, self.head(x), out_lengths


def embed_frames(features: np.ndarray, model: SpeechEmbedder) -> tuple[np.ndarray, np.ndarray]:
    """Run one feature matrix through the embedder in inference mode.

    Returns (hidden (T_e, model_dim), logits (T_e, inventory_size)).
    """
    feats = np.asarray(features, dtype=np.float32)
    if feats.ndim != 2 or feats.shape[1] != model.cfg.input_dim:
        raise ValueError(
            f"expected (T, {model.cfg.input_dim}) features, got {feats.shape}"
        )
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(feats)[None]
        lengths = torch.tensor([feats.shape[0]])
        hidden, logits, _ = model(x, lengths)
    return hidden[0].numpy(), logits[0].numpy()


def resample_indices(src_len: int, dst_len: int) -> np.ndarray:
    """Nearest-frame source index for each of dst_len output frames."""
    return np.minimum((np.arange(dst_len) * src_len) // dst_len, src_len - 1)


def frame_phoneme_predictions(frame_logits: np.ndarray, num_audio: int) -> np.ndarray:
    """Per-frame argmax phoneme IDs, nearest-resampled to the audio time axis.

    Ties break toward the lowest phoneme ID.
    """
    logits = np.asarray(frame_logits)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("frame_logits must be a non-empty (T_e, P) matrix")
    preds = np.argmax(logits, axis=1)
    return preds[resample_indices(len(preds), num_audio)]


def _check_corpus(corpus, cfg: EmbedderConfig):
    """Drop items whose CTC target cannot fit in the embedder output."""
    usable = []
    for feats, targets in corpus:
        out_len = cfg.output_length(len(feats))
        if len(targets) == 0 or len(targets) >= out_len:
            log.warning(
                "skipping item: target length %d does not fit output length %d",
                len(targets), out_len,
            )
            continue
        usable.append((np.asarray(feats, dtype=np.float32), np.asarray(targets, dtype=np.int64)))
    return usable


def bucketed_batches(lengths, batch_size: int, rng: np.random.Generator, window: int = 8):
    """Shuffled batch index lists, length-sorted within windows to limit padding.

    Deterministic for a given rng state; batch order is itself shuffled.
    """
    order = rng.permutation(len(lengths))
    span = batch_size * window
    buckets = []
    for start in range(0, len(order), span):
        chunk = sorted(order[start : start + span], key=lambda i: lengths[i])
        buckets.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
    rng.shuffle(buckets)
    return buckets


def _run_ctc_epochs(model, items, epochs, batch_size, lr, rng, history, optimizer):
    ctc = nn.CTCLoss(blank=0, zero_infinity=True)
    lengths = [len(f) for f, _ in items]
    for epoch in range(epochs):
        model.train()
        losses = []
        for step, idx in enumerate(bucketed_batches(lengths, batch_size, rng)):
            batch = [items[i] for i in idx]
            feats = [torch.from_numpy(f) for f, _ in batch]
            lengths = torch.tensor([len(f) for f, _ in batch])
            targets = [torch.from_numpy(t) for _, t in batch]
            target_lengths = torch.tensor([len(t) for t in targets])
            padded = nn.utils.rnn.pad_sequence(feats, batch_first=True)

            _, logits, out_lengths = model(padded, lengths)
            log_probs = F.log_softmax(logits, dim=-1).transpose(0, 1)
            loss = ctc(log_probs, torch.cat(targets), out_lengths, target_lengths)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"CTC loss diverged (non-finite) at epoch {len(history)}, step {step}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.info("ctc epoch %d: loss %.4f", len(history), history[-1])


def pretrain_ctc(
    corpus,
    cfg: EmbedderConfig,
    seed: int,
    epochs: int = 30,
    batch_size: int = 32,
    learning_rate: float = 3e-4,
    finetune_corpus=None,
    finetune_epochs: int = 0,
) -> tuple[SpeechEmbedder, list[float]]:
    """Train the embedder with phoneme-level CTC.

    Args:
        corpus: iterable of (features (T, input_dim), phoneme_ids) pairs; the
            phoneme targets must not contain the blank ID.
        finetune_corpus: optional second-stage corpus (e.g. shorter phrases),
            trained for finetune_epochs after the main stage.

    Returns:
        (trained model, per-epoch mean training loss).
    """
    items = _check_corpus(corpus, cfg)
    if not items:
        raise ValueError("corpus is empty (or no item fits the embedder output length)")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = SpeechEmbedder(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    history: list[float] = []
    _run_ctc_epochs(model, items, epochs, batch_size, learning_rate, rng, history, optimizer)
    if finetune_corpus is not None and finetune_epochs > 0:
        finetune_items = _check_corpus(finetune_corpus, cfg)
        if not finetune_items:
            raise ValueError("finetune corpus is empty")
        _run_ctc_epochs(
            model, finetune_items, finetune_epochs, batch_size, learning_rate, rng, history, optimizer
        )
    model.eval()
    return model, history


def save_embedder(model: SpeechEmbedder, path: str | Path, seed: int, epoch: int) -> None:
    header = {
        "kind": "embedder",
        "config": asdict(model.cfg),
        "seed": seed,
        "epoch": epoch,
    }
    save_checkpoint(path, header, model.state_dict())


def load_embedder(path: str | Path) -> SpeechEmbedder:
    header, state = load_checkpoint(path)
    if header.get("kind") != "embedder":
        raise ValueError(f"{path}: checkpoint kind {header.get('kind')!r} is not an embedder")
    model = SpeechEmbedder(EmbedderConfig(**header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model
