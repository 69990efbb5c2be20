"""End-to-end trainer, EER/AUC evaluator, and multi-seed aggregation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .datagen import EvalPair, UtteranceRecord, load_features
from .encoders import EncoderConfig
from .features import Lexicon, phonemize
from .losses import (
    consecutive_index,
    detection_loss,
    duration_target_matrix,
    merge_blank_predictions,
    monotonic_target_matrix,
    noise_target_matrix,
    pda_loss,
    total_loss,
)
from .model import DetectorOutput, KeywordDetector, save_detector
from .speech_embedder import SpeechEmbedder, embed_frames, frame_phoneme_predictions

log = logging.getLogger(__name__)

LOSS_MODES = ("detection_only", "detection+pda", "detection+mm")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC operating points at every distinct score threshold (accept if >= t).

    Returns (fpr, tpr, thresholds), starting at (0, 0) for a threshold just
    above the highest score and ending at (1, 1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and the same length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative")

    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    last_of_run = np.append(s[1:] != s[:-1], True)
    tpr = np.concatenate(([0.0], tp[last_of_run] / n_pos))
    fpr = np.concatenate(([0.0], fp[last_of_run] / n_neg))
    thresholds = np.concatenate(([np.nextafter(s[0], np.inf)], s[last_of_run]))
    return fpr, tpr, thresholds


def compute_eer(scores, labels) -> tuple[float, float]:
    """Equal error rate and its threshold.

    The EER is where the false-accept and false-reject rates cross, linearly
    interpolated between adjacent ROC operating points. Returned as a
    fraction in [0, 1].
    """
    fpr, tpr, thresholds = roc_curve(scores, labels)
    fnr = 1.0 - tpr
    diff = fpr - fnr                       # monotone, from -1 to +1
    k = int(np.searchsorted(diff >= 0, True))
    if diff[k] == 0.0:
        return float(fpr[k]), float(thresholds[k])
    alpha = -diff[k - 1] / (diff[k] - diff[k - 1])
    eer = fpr[k - 1] + alpha * (fpr[k] - fpr[k - 1])
    threshold = thresholds[k - 1] + alpha * (thresholds[k] - thresholds[k - 1])
    return float(eer), float(threshold)


def compute_auc(scores, labels) -> float:
    """Area under the ROC curve via trapezoidal integration.

    Equals the pairwise Mann-Whitney statistic P(pos > neg) + 0.5 P(tie).
    """
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def aggregate_runs(reports: list[dict]) -> dict:
    """Mean and sample standard deviation of per-dataset metrics across seeds."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to aggregate")
    datasets = sorted(reports[0]["datasets"])
    for rep in reports[1:]:
        if sorted(rep["datasets"]) != datasets:
            raise ValueError(
                f"mismatched dataset sets: {sorted(rep['datasets'])} vs {datasets}"
            )
    agg = {"seeds": [rep.get("seed") for rep in reports], "datasets": {}, "table": []}
    for name in datasets:
        entry = {}
        for metric in ("eer", "auc"):
            values = np.array([rep["datasets"][name][metric] for rep in reports], dtype=float)
            entry[f"{metric}_mean"] = float(values.mean())
            entry[f"{metric}_std"] = float(values.std(ddof=1))
            entry[f"{metric}_values"] = values.tolist()
        agg["datasets"][name] = entry
        agg["table"].append(
            f"{name}: EER {entry['eer_mean']:.2f} ± {entry['eer_std']:.2f} %, "
            f"AUC {entry['auc_mean']:.2f} ± {entry['auc_std']:.2f} %"
        )
    return agg


# ---------------------------------------------------------------------------
# Pair scoring
# ---------------------------------------------------------------------------

@dataclass
class ScoredPair:
    audio_id: str
    text: str
    label: int
    score: float | None
    difficulty: str = "n/a"
    levenshtein_distance: int = 0
    skipped: bool = False


def _pad_batch(arrays: list[np.ndarray], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(a) for a in arrays])
    tensors = [torch.as_tensor(np.asarray(a)).to(dtype) for a in arrays]
    return torch.nn.utils.rnn.pad_sequence(tensors, batch_first=True), lengths


class UtteranceCache:
    """Features and frozen-embedder outputs per utterance, computed once."""

    def __init__(
        self,
        records: list[UtteranceRecord],
        manifest_dir: str | Path,
        embedder: SpeechEmbedder,
        audio_output_length,
        merge_blanks: bool = False,
    ):
        self.features: dict[str, np.ndarray] = {}
        self.hidden: dict[str, np.ndarray] = {}
        self.preds: dict[str, np.ndarray] = {}
        self.ta: dict[str, int] = {}
        for rec in records:
            feats = load_features(rec, manifest_dir)
            hidden, logits = embed_frames(feats, embedder)
            ta = audio_output_length(len(feats))
            preds = frame_phoneme_predictions(logits, ta)
            if merge_blanks:
                preds = merge_blank_predictions(preds)
            self.features[rec.id] = feats
            self.hidden[rec.id] = hidden
            self.preds[rec.id] = preds
            self.ta[rec.id] = ta


def score_pairs(
    model: KeywordDetector,
    pairs: list[EvalPair],
    records: list[UtteranceRecord],
    manifest_dir: str | Path,
    lexicon: Lexicon,
    batch_size: int = 64,
    cache: UtteranceCache | None = None,
) -> list[ScoredPair]:
    """Score audio/text pairs with the full forward pass, in input order.

    Pairs whose audio or text cannot be prepared are marked skipped and
    reported with a warning instead of aborting the run.
    """
    by_id = {rec.id: rec for rec in records}
    if cache is None:
        cache = UtteranceCache(
            records, manifest_dir, model.embedder, model.audio_encoder.output_length
        )
    model.eval()
    results: list[ScoredPair] = []
    prepared: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]] = []
    for pair in pairs:
        out = ScoredPair(
            pair.audio_id, pair.text, pair.label, None, pair.difficulty, pair.levenshtein_distance
        )
        results.append(out)
        try:
            rec = by_id[pair.audio_id]
            phonemes = phonemize(pair.text, lexicon)
            prepared.append(
                (len(results) - 1, cache.features[rec.id], cache.hidden[rec.id], phonemes)
            )
        except (KeyError, ValueError) as err:
            out.skipped = True
            log.warning("skipping pair (%s, %r): %s", pair.audio_id, pair.text, err)

    with torch.no_grad():
        for start in range(0, len(prepared), batch_size):
            chunk = prepared[start : start + batch_size]
            feats, feat_lengths = _pad_batch([c[1] for c in chunk], torch.float32)
            hidden, _ = _pad_batch([c[2] for c in chunk], torch.float32)
            phons, text_lengths = _pad_batch([c[3] for c in chunk], torch.int64)
            out = model(feats, feat_lengths, phons, text_lengths, hidden=hidden)
            for (idx, *_), score in zip(chunk, out.score.tolist()):
                results[idx].score = float(score)
    return results


def evaluate_scored(scored: list[ScoredPair], seed: int | None = None) -> dict:
    """Per-difficulty EER/AUC report (percentages) from scored pairs.

    Datasets: 'easy' and 'hard' pit the positives against that difficulty's
    negatives; 'all' uses every non-skipped pair.
    """
    usable = [s for s in scored if not s.skipped]
    subsets = {
        "easy": [s for s in usable if s.label == 1 or s.difficulty == "easy"],
        "hard": [s for s in usable if s.label == 1 or s.difficulty == "hard"],
        "all": usable,
    }
    report: dict = {"seed": seed, "datasets": {}}
    for name, subset in subsets.items():
        labels = np.array([s.label for s in subset])
        if len(subset) == 0 or labels.min() == labels.max():
            continue
        scores = np.array([s.score for s in subset])
        eer, threshold = compute_eer(scores, labels)
        report["datasets"][name] = {
            "eer": 100.0 * eer,
            "auc": 100.0 * compute_auc(scores, labels),
            "threshold": threshold,
            "num_pairs": len(subset),
            "scores": scores.tolist(),
            "labels": labels.tolist(),
        }
    return report


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3          # Adam, fixed (no schedule)
    pda_weight: float = 0.3              # lambda
    sharpness: float = 0.1               # g
    loss_mode: str = "detection+pda"
    pda_reduction: str = "mean"
    merge_blanks: bool = False
    freeze_embedder: bool = True
    negatives_per_positive: int = 1
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass
class TrainResult:
    model: KeywordDetector
    best_path: str
    log_path: str
    best_epoch: int
    best_eer: float
    history: list[dict] = field(default_factory=list)


def _alignment_target(item_pred, ta: int, tt: int, positive: bool, cfg: TrainConfig, rng):
    if not positive:
        return noise_target_matrix(ta, tt, rng)
    if cfg.loss_mode == "detection+mm":
        return monotonic_target_matrix(ta, tt, sharpness=cfg.sharpness)
    c = consecutive_index(item_pred)
    return duration_target_matrix(c, tt, sharpness=cfg.sharpness)


def train(
    embedder: SpeechEmbedder,
    train_records: list[UtteranceRecord],
    valid_pairs: list[EvalPair],
    valid_records: list[UtteranceRecord],
    manifest_dir: str | Path,
    lexicon: Lexicon,
    cfg: TrainConfig,
    out_dir: str | Path,
    encoder_cfg: EncoderConfig | None = None,
) -> TrainResult:
    """Train the detector; select the best epoch by validation EER.

    The embedder stays frozen (per cfg.freeze_embedder) and its outputs are
    cached up front. Deterministic for a fixed cfg.seed: initialization,
    batch order, negative sampling, and noise-target draws all derive from it.
    """
    if not train_records:
        raise ValueError("empty training manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if encoder_cfg is None:
        encoder_cfg = EncoderConfig(freeze_embedder=cfg.freeze_embedder)

    torch.manual_seed(cfg.seed)
    model = KeywordDetector(embedder, encoder_cfg)
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.learning_rate)

    cache = UtteranceCache(
        train_records, manifest_dir, embedder, model.audio_encoder.output_length, cfg.merge_blanks
    )
    valid_cache = UtteranceCache(
        valid_records, manifest_dir, embedder, model.audio_encoder.output_length, cfg.merge_blanks
    )
    text_to_ids = {}
    for rec in train_records:
        text_to_ids.setdefault(rec.text, np.asarray(rec.phoneme_ids, dtype=np.int64))
    texts = sorted(text_to_ids)
    if len(texts) < 2:
        raise ValueError("need at least two distinct keywords to sample negatives")

    seed_seq = np.random.SeedSequence(cfg.seed)
    pair_rng, noise_rng = [np.random.default_rng(s) for s in seed_seq.spawn(2)]

    log_path = out_dir / "train_log.jsonl"
    history: list[dict] = []
    best_eer, best_epoch = float("inf"), -1
    best_path = out_dir / "best.ckpt"
    epochs_since_best = 0

    with log_path.open("w") as log_file:
        for epoch in range(cfg.epochs):
            model.train()
            examples = []
            for rec in train_records:
                examples.append((rec.id, rec.text, 1))
                others = [t for t in texts if t != rec.text]
                for _ in range(cfg.negatives_per_positive):
                    examples.append((rec.id, others[int(pair_rng.integers(len(others)))], 0))
            pair_rng.shuffle(examples)

            epoch_losses = []
            for start in range(0, len(examples), cfg.batch_size):
                batch = examples[start : start + cfg.batch_size]
                feats, feat_lengths = _pad_batch(
                    [cache.features[rid] for rid, _, _ in batch], torch.float32
                )
                hidden, _ = _pad_batch([cache.hidden[rid] for rid, _, _ in batch], torch.float32)
                phons, text_lengths = _pad_batch(
                    [text_to_ids[text] for _, text, _ in batch], torch.int64
                )
                ys = torch.tensor([float(y) for _, _, y in batch])

                out: DetectorOutput = model(feats, feat_lengths, phons, text_lengths, hidden=hidden)
                l_d = detection_loss(out.score, ys)
                if cfg.loss_mode == "detection_only":
                    l_pda = torch.zeros(())
                else:
                    per_pair = []
                    for i, (rid, _, y) in enumerate(batch):
                        ta = int(out.ta_lengths[i])
                        tt = int(out.tt_lengths[i])
                        target = _alignment_target(
                            cache.preds[rid], ta, tt, y == 1, cfg, noise_rng
                        )
                        per_pair.append(
                            pda_loss(
                                out.fusion.affinity[i, :ta, :tt], target, cfg.pda_reduction
                            )
                        )
                    l_pda = torch.stack(per_pair).mean()
                loss = total_loss(l_pda, l_d, cfg.pda_weight)

                if not torch.isfinite(loss):
                    save_detector(model, out_dir / "last_good.ckpt", cfg.seed, epoch)
                    raise RuntimeError(
                        f"training diverged (non-finite loss) at epoch {epoch}; "
                        f"last good weights in {out_dir / 'last_good.ckpt'}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step_entry = {
                    "epoch": epoch,
                    "step": start // cfg.batch_size,
                    "l_d": float(l_d.item()),
                    "l_pda": float(l_pda.item()),
                    "l_total": float(loss.item()),
                }
                epoch_losses.append(step_entry)
                log_file.write(json.dumps(step_entry) + "\n")

            scored = score_pairs(
                model, valid_pairs, valid_records, manifest_dir, lexicon,
                batch_size=cfg.batch_size, cache=valid_cache,
            )
            val_report = evaluate_scored(scored, seed=cfg.seed)
            val_eer = val_report["datasets"]["all"]["eer"]
            entry = {
                "epoch": epoch,
                "l_d": float(np.mean([e["l_d"] for e in epoch_losses])),
                "l_pda": float(np.mean([e["l_pda"] for e in epoch_losses])),
                "l_total": float(np.mean([e["l_total"] for e in epoch_losses])),
                "val_eer": val_eer,
            }
            history.append(entry)
            log_file.write(json.dumps({"epoch_summary": entry}) + "\n")
            log.info(
                "epoch %d: L_D %.4f, L_PDA %.4f, val EER %.2f%%",
                epoch, entry["l_d"], entry["l_pda"], val_eer,
            )

            save_detector(model, out_dir / f"epoch_{epoch:03d}.ckpt", cfg.seed, epoch)
            if val_eer < best_eer:
                best_eer, best_epoch = val_eer, epoch
                epochs_since_best = 0
                save_detector(
                    model, best_path, cfg.seed, epoch, extra={"val_eer": val_eer}
                )
            else:
                epochs_since_best += 1
                if epochs_since_best >= cfg.patience:
                    log.info("early stop at epoch %d (best %.2f%% at %d)", epoch, best_eer, best_epoch)
                    break

    return TrainResult(
        model=model,
        best_path=str(best_path),
        log_path=str(log_path),
        best_epoch=best_epoch,
        best_eer=best_eer,
        history=history,
    )


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

def plot_report(report: dict, out_path: str | Path, history: list[dict] | None = None) -> None:
    """ROC curves per dataset, plus loss curves when a history is given."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_panels = 2 if history else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(6 * n_panels, 5))
    ax_roc = axes[0] if n_panels == 2 else axes
    for name, data in sorted(report["datasets"].items()):
        fpr, tpr, _ = roc_curve(np.array(data["scores"]), np.array(data["labels"]))
        ax_roc.plot(fpr, tpr, label=f"{name} (EER {data['eer']:.2f}%)")
    ax_roc.plot([0, 1], [1, 0], "k:", lw=0.8)
    ax_roc.set_xlabel("false accept rate")
    ax_roc.set_ylabel("true accept rate")
    ax_roc.legend()
    ax_roc.set_title("ROC")
    if history:
        ax_loss = axes[1]
        epochs = [h["epoch"] for h in history]
        for key in ("l_d", "l_pda", "l_total"):
            ax_loss.plot(epochs, [h[key] for h in history], label=key)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend()
        ax_loss.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def save_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))


def load_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def report_to_csv(agg: dict, path: str | Path) -> None:
    """CSV table of aggregated metrics."""
    lines = ["dataset,eer_mean,eer_std,auc_mean,auc_std"]
    for name, entry in sorted(agg["datasets"].items()):
        lines.append(
            f"{name},{entry['eer_mean']:.4f},{entry['eer_std']:.4f},"
            f"{entry['auc_mean']:.4f},{entry['auc_std']:.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
