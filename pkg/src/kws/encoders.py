"""Audio and text encoders producing embeddings in a shared dimension."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .speech_embedder import SpeechEmbedder, lengths_to_mask

EMBED_DIM = 128


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = EMBED_DIM
    path_channels: int = 128       # per-path output channels; concat feeds the GRU
    phoneme_embed_dim: int = 64
    freeze_embedder: bool = True


def _pack_gru(gru: nn.GRU, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    packed = nn.utils.rnn.pack_padded_sequence(
        x, lengths.cpu(), batch_first=True, enforce_sorted=False
    )
    out, _ = gru(packed)
    out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
    return out


def crop_or_pad(x: torch.Tensor, length: int) -> torch.Tensor:
    """Crop or right-pad (zeros) the time axis of (B, T, C) to `length`."""
    t = x.shape[1]
    if t >= length:
        return x[:, :length]
    pad = x.new_zeros(x.shape[0], length - t, x.shape[2])
    return torch.cat([x, pad], dim=1)


class AudioEncoder(nn.Module):
    """Dual-path feature extractor over the frozen frame embedder, then a GRU.

    Path 1 upsamples the embedder hidden states with a transposed conv
    (kernel 5, stride 4); path 2 is a conv (kernel 3, stride 2) followed by a
    transposed conv (kernel 3, stride 2) on the raw features. Both paths are
    aligned to path 2's length, concatenated, and fed to a single GRU.
    """

    def __init__(self, embedder: SpeechEmbedder, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.embedder = embedder
        if cfg.freeze_embedder:
            self.embedder.requires_grad_(False)
            self.embedder.eval()
        ch = cfg.path_channels
        self.path1_up = nn.ConvTranspose1d(embedder.cfg.model_dim, ch, kernel_size=5, stride=4)
        self.path2_down = nn.Conv1d(embedder.cfg.input_dim, ch, kernel_size=3, stride=2, padding=1)
        self.path2_up = nn.ConvTranspose1d(
            ch, ch, kernel_size=3, stride=2, padding=1, output_padding=1
        )
        self.gru = nn.GRU(2 * ch, cfg.embed_dim, batch_first=True)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.cfg.freeze_embedder:
            self.embedder.eval()
        return self

    def output_length(self, num_frames: int) -> int:
        """Audio embedding length T_a for a feature matrix of num_frames rows."""
        down = (num_frames - 1) // 2 + 1
        return 2 * down

    def forward(
        self,
        features: torch.Tensor,
        lengths: torch.Tensor,
        hidden: torch.Tensor | None = None,
        hidden_lengths: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """features (B, T, 80) -> (E_a (B, T_a, d), ta_lengths).

        `hidden` optionally supplies precomputed embedder hidden states
        (B, T_e, model_dim); with a frozen embedder they never change, so
        callers may cache them.
        """
        if features.ndim != 3 or features.shape[1] < 1:
            raise ValueError("features must be (B, T>=1, input_dim)")
        if features.shape[2] != self.embedder.cfg.input_dim:
            raise ValueError(
                f"expected {self.embedder.cfg.input_dim} feature channels, got {features.shape[2]}"
            )
        features = features * lengths_to_mask(lengths, features.shape[1])[:, :, None]
        if hidden is None:
            if self.cfg.freeze_embedder:
                with torch.no_grad():
                    hidden, _, hidden_lengths = self.embedder(features, lengths)
            else:
                hidden, _, hidden_lengths = self.embedder(features, lengths)
        elif hidden_lengths is None:
            hidden_lengths = torch.tensor(
                [self.embedder.cfg.output_length(int(n)) for n in lengths]
            )

        p1 = self.path1_up(hidden.transpose(1, 2)).transpose(1, 2)
        down = self.path2_down(features.transpose(1, 2))
        # Re-zero padded frames (conv bias made them nonzero) before upsampling,
        # so batch padding cannot bleed into the last valid output frames.
        down_lengths = torch.tensor([(int(n) - 1) // 2 + 1 for n in lengths])
        down = down * lengths_to_mask(down_lengths, down.shape[2])[:, None, :]
        p2 = self.path2_up(down).transpose(1, 2)

        ta_lengths = torch.tensor([self.output_length(int(n)) for n in lengths])
        t_a = int(ta_lengths.max())
        fused = torch.cat([crop_or_pad(p1, t_a), crop_or_pad(p2, t_a)], dim=-1)
        fused = fused * lengths_to_mask(ta_lengths, t_a)[:, :, None]
        out = _pack_gru(self.gru, fused, ta_lengths)
        return out, ta_lengths


class TextEncoder(nn.Module):
    """Learned phoneme embedding table followed by a single GRU layer."""

    def __init__(self, inventory_size: int, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.embedding = nn.Embedding(inventory_size, cfg.phoneme_embed_dim)
        self.gru = nn.GRU(cfg.phoneme_embed_dim, cfg.embed_dim, batch_first=True)

    def forward(self, phonemes: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """phonemes (B, T_t) int64 -> E_t (B, T_t, d)."""
        if phonemes.ndim != 2 or phonemes.shape[1] < 1:
            raise ValueError("phoneme batch must be (B, T_t>=1)")
        return _pack_gru(self.gru, self.embedding(phonemes), lengths)
