"""Full keyword detector: encoders, pattern extractor, and discriminator."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .encoders import AudioEncoder, EncoderConfig, TextEncoder
from .fusion import FusionOutput, PatternDiscriminator, PatternExtractor
from .speech_embedder import EmbedderConfig, SpeechEmbedder, lengths_to_mask


class DetectorOutput(NamedTuple):
    score: torch.Tensor          # (B,) sigmoid detection probability
    fusion: FusionOutput
    ta_lengths: torch.Tensor     # (B,) valid audio-embedding lengths
    tt_lengths: torch.Tensor     # (B,) valid text lengths


class KeywordDetector(nn.Module):
    """Scores whether a spoken utterance contains a text-enrolled keyword."""

    def __init__(self, embedder: SpeechEmbedder, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.audio_encoder = AudioEncoder(embedder, cfg)
        self.text_encoder = TextEncoder(embedder.cfg.inventory_size, cfg)
        self.extractor = PatternExtractor(cfg.embed_dim)
        self.discriminator = PatternDiscriminator(cfg.embed_dim)

    @property
    def embedder(self) -> SpeechEmbedder:
        return self.audio_encoder.embedder

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(
        self,
        features: torch.Tensor,
        feat_lengths: torch.Tensor,
        phonemes: torch.Tensor,
        text_lengths: torch.Tensor,
        hidden: torch.Tensor | None = None,
    ) -> DetectorOutput:
        """Score a padded batch of (utterance, keyword-text) pairs.

        hidden optionally carries cached embedder outputs (B, T_e, model_dim).
        """
        e_a, ta_lengths = self.audio_encoder(features, feat_lengths, hidden=hidden)
        e_t = self.text_encoder(phonemes, text_lengths)
        a_mask = lengths_to_mask(ta_lengths, e_a.shape[1])
        t_mask = lengths_to_mask(text_lengths, e_t.shape[1])
        fusion = self.extractor(e_a, e_t, a_mask, t_mask)
        score = self.discriminator(fusion, a_mask, t_mask)
        return DetectorOutput(score, fusion, ta_lengths, text_lengths)


def save_detector(model: KeywordDetector, path: str | Path, seed: int, epoch: int, extra: dict | None = None) -> None:
    header = {
        "kind": "detector",
        "config": asdict(model.cfg),
        "embedder_config": asdict(model.embedder.cfg),
        "seed": seed,
        "epoch": epoch,
    }
    if extra:
        header.update(extra)
    save_checkpoint(path, header, model.state_dict())


def load_detector(path: str | Path) -> KeywordDetector:
    header, state = load_checkpoint(path)
    if header.get("kind") != "detector":
        raise ValueError(f"{path}: checkpoint kind {header.get('kind')!r} is not a detector")
    embedder = SpeechEmbedder(EmbedderConfig(**header["embedder_config"]))
    model = KeywordDetector(embedder, EncoderConfig(**header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model
