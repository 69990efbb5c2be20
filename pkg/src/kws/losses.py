"""Training objective: duration-based alignment targets, detection BCE, total loss."""

from __future__ import annotations

import numpy as np
import torch

ALIGNMENT_SHARPNESS = 0.1     # g: spread of the duration target around the diagonal
PDA_WEIGHT = 0.3              # lambda: weight of the alignment term in the total loss
PROB_CLAMP = 1e-7             # BCE probability guard


def consecutive_index(predictions) -> np.ndarray:
    """Group index per frame: starts at 1 and increments at every change point.

    Consecutive identical phoneme predictions share one index, so the result
    encodes predicted phoneme durations.
    """
    p = np.asarray(predictions)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("predictions must be a non-empty 1-D sequence")
    changes = np.concatenate(([0], (p[1:] != p[:-1]).astype(np.int64)))
    return 1 + np.cumsum(changes)


def merge_blank_predictions(predictions, blank_id: int = 0) -> np.ndarray:
    """Optional preprocessing: fold blank frames into the preceding phoneme run
    (leading blanks join the first non-blank run)."""
    p = np.asarray(predictions).copy()
    if p.ndim != 1 or p.size == 0:
        raise ValueError("predictions must be a non-empty 1-D sequence")
    nonblank = np.flatnonzero(p != blank_id)
    if nonblank.size == 0:
        return p
    p[: nonblank[0]] = p[nonblank[0]]
    for i in range(1, len(p)):
        if p[i] == blank_id:
            p[i] = p[i - 1]
    return p


def _column_softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=0)


def duration_target_matrix(
    c, num_text: int, sharpness: float = ALIGNMENT_SHARPNESS, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Column-stochastic (T_a, T_t) target built from the consecutive index vector.

    Entry scores are -((j - c_i) / T_t)^2 / (2 g^2) with 1-based i, j, softmaxed
    over the audio axis within each text column.
    """
    if num_text < 1:
        raise ValueError("num_text must be >= 1")
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    c_t = torch.as_tensor(np.asarray(c), dtype=dtype).reshape(-1, 1)
    j = torch.arange(1, num_text + 1, dtype=dtype).reshape(1, -1)
    d = j - c_t
    x = -((d / num_text) ** 2) / (2.0 * sharpness**2)
    return _column_softmax(x)


def noise_target_matrix(
    num_audio: int, num_text: int, rng: np.random.Generator, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Negative-pair target: i.i.d. standard normal scores, column-softmaxed so
    it shares the duration target's geometry."""
    z = rng.standard_normal((num_audio, num_text))
    return _column_softmax(torch.as_tensor(z, dtype=dtype))


def monotonic_target_matrix(
    num_audio: int, num_text: int, sharpness: float = ALIGNMENT_SHARPNESS, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Ablation target: duration-blind linear index c_i = 1 + floor((i-1) T_t / T_a)."""
    if num_audio < 1 or num_text < 1:
        raise ValueError("matrix dimensions must be >= 1")
    i = np.arange(num_audio, dtype=np.int64)
    c = 1 + (i * num_text) // num_audio
    return duration_target_matrix(c, num_text, sharpness=sharpness, dtype=dtype)


def pda_loss(affinity: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Squared error between the affinity matrix and an alignment target.

    reduction="mean" averages over all T_a * T_t entries (default, keeps the
    loss scale independent of pair length); "sum" is the unreduced reading.
    """
    if affinity.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(affinity.shape)} vs {tuple(target.shape)}")
    sq = (affinity - target) ** 2
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        return sq.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def detection_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on the discriminator probability, clamped for safety."""
    y_hat = torch.as_tensor(y_hat)
    y = torch.as_tensor(y, dtype=y_hat.dtype)
    p = y_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def total_loss(pda, detection, weight: float = PDA_WEIGHT):
    """Weighted objective: weight * alignment loss + detection loss."""
    return weight * pda + detection
