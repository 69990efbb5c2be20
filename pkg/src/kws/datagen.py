"""Synthetic keyword corpus generation, evaluation-pair construction, and corpus ingestion."""

from __future__ import annotations

import json
import logging
import wave
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .features import (
    BLANK_SYMBOL,
    DEFAULT_ALPHABET,
    FeatureConfig,
    Lexicon,
    compute_filterbank,
    phonemize,
    read_wav,
    save_lexicon,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic prototype-rendered corpus."""

    inventory_size: int = 12          # includes the reserved blank ID 0
    keyword_count: int = 20
    utterance_count: int = 200
    words_per_phrase: tuple[int, int] = (1, 4)
    phonemes_per_word: tuple[int, int] = (2, 5)
    frames_per_phoneme: tuple[int, int] = (4, 12)
    prototype_dim: int = 80
    noise_std: float = 0.1
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.inventory_size < 3:
            raise ValueError("inventory needs blank plus at least two phonemes")
        if self.keyword_count < 2:
            raise ValueError("need at least two keywords")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass
class UtteranceRecord:
    """One corpus item; true_durations is None for ingested (real) audio."""

    id: str
    text: str
    phoneme_ids: list[int]
    split: str
    features_path: str
    true_durations: list[int] | None = None

    def __post_init__(self):
        if self.true_durations is not None:
            if len(self.true_durations) != len(self.phoneme_ids):
                raise ValueError(f"{self.id}: durations/phonemes length mismatch")


@dataclass
class EvalPair:
    """Audio/text trial: label 1 iff text matches the audio's transcript."""

    audio_id: str
    text: str
    label: int
    difficulty: str = "n/a"           # easy | hard | n/a; negatives only
    levenshtein_distance: int = 0


def frame_labels(record: UtteranceRecord) -> np.ndarray:
    """Per-frame phoneme IDs expanded from the record's true durations."""
    if record.true_durations is None:
        raise ValueError(f"{record.id} has no ground-truth durations")
    return np.repeat(
        np.asarray(record.phoneme_ids, dtype=np.int64),
        np.asarray(record.true_durations, dtype=np.int64),
    )


def _make_word(rng: np.random.Generator, length: int, used: set[str]) -> str:
    while True:
        word = "".join(rng.choice(list(DEFAULT_ALPHABET), size=length))
        if word not in used:
            used.add(word)
            return word


def _mutate_phonemes(rng: np.random.Generator, ids: tuple[int, ...], inventory: int) -> tuple[int, ...]:
    """Substitute one phoneme for a different non-blank one."""
    ids = list(ids)
    pos = int(rng.integers(0, len(ids)))
    choices = [p for p in range(1, inventory) if p != ids[pos]]
    ids[pos] = int(rng.choice(choices))
    return tuple(ids)


def build_synth_lexicon(cfg: SynthConfig, rng: np.random.Generator) -> tuple[Lexicon, list[str]]:
    """Random lexicon plus keyword phrases; half the keywords are one-substitution
    variants of earlier ones so hard negative pairs always exist."""
    n_phones = cfg.inventory_size - 1
    symbols = [BLANK_SYMBOL] + [f"p{i}" for i in range(1, cfg.inventory_size)]
    fallback = {ch: (i % n_phones) + 1 for i, ch in enumerate(DEFAULT_ALPHABET)}

    used_words: set[str] = set(DEFAULT_ALPHABET)
    entries: dict[str, tuple[int, ...]] = {}
    keywords: list[str] = []
    base_count = (cfg.keyword_count + 1) // 2
    lo_w, hi_w = cfg.words_per_phrase
    lo_p, hi_p = cfg.phonemes_per_word

    for _ in range(base_count):
        n_words = int(rng.integers(lo_w, hi_w + 1))
        phrase_words = []
        for _ in range(n_words):
            word = _make_word(rng, int(rng.integers(3, 7)), used_words)
            entries[word] = tuple(
                int(p) for p in rng.integers(1, cfg.inventory_size, size=int(rng.integers(lo_p, hi_p + 1)))
            )
            phrase_words.append(word)
        keywords.append(" ".join(phrase_words))

    while len(keywords) < cfg.keyword_count:
        source = keywords[int(rng.integers(0, base_count))]
        words = source.split()
        pos = int(rng.integers(0, len(words)))
        variant = _make_word(rng, len(words[pos]), used_words)
        entries[variant] = _mutate_phonemes(rng, entries[words[pos]], cfg.inventory_size)
        words[pos] = variant
        phrase = " ".join(words)
        if phrase not in keywords:
            keywords.append(phrase)

    lex = Lexicon(symbols=symbols, entries=entries, fallback=fallback)
    return lex, keywords


def synth_corpus(cfg: SynthConfig, out_dir: str | Path) -> list[UtteranceRecord]:
    """Render a synthetic corpus and write manifest, lexicon, and feature files.

    Each phoneme gets a fixed random prototype vector; an utterance renders
    every phoneme as `duration` noisy copies of its prototype, so ground-truth
    durations are known exactly. Deterministic per cfg.seed.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    prototypes = rng.normal(0.0, 1.0, size=(cfg.inventory_size, cfg.prototype_dim))
    lexicon, keywords = build_synth_lexicon(cfg, rng)
    save_lexicon(lexicon, out_dir / "lexicon.txt")

    lo_d, hi_d = cfg.frames_per_phoneme
    records: list[UtteranceRecord] = []
    per_keyword = [[] for _ in keywords]
    for i in range(cfg.utterance_count):
        per_keyword[i % len(keywords)].append(i)

    for k, (text, indices) in enumerate(zip(keywords, per_keyword)):
        ids = phonemize(text, lexicon)
        n = len(indices)
        n_train = max(1, int(round(n * cfg.split_fractions[0])))
        n_valid = max(1 if n - n_train >= 2 else 0, int(round(n * cfg.split_fractions[1])))
        for pos, i in enumerate(indices):
            durations = rng.integers(lo_d, hi_d + 1, size=len(ids))
            segments = [
                prototypes[p] + rng.normal(0.0, cfg.noise_std, size=(d, cfg.prototype_dim))
                for p, d in zip(ids, durations)
            ]
            feats = np.concatenate(segments, axis=0).astype(np.float32)
            split = "train" if pos < n_train else ("valid" if pos < n_train + n_valid else "test")
            rec_id = f"utt{i:05d}"
            rel = f"features/{rec_id}.npy"
            np.save(out_dir / rel, feats)
            records.append(
                UtteranceRecord(
                    id=rec_id,
                    text=text,
                    phoneme_ids=[int(p) for p in ids],
                    split=split,
                    features_path=rel,
                    true_durations=[int(d) for d in durations],
                )
            )

    records.sort(key=lambda r: r.id)
    save_manifest(records, out_dir / "manifest.jsonl")
    np.save(out_dir / "prototypes.npy", prototypes)
    return records


def save_manifest(records: list[UtteranceRecord], path: str | Path) -> None:
    with Path(path).open("w") as f:
        for rec in records:
            f.write(json.dumps(asdict(rec)) + "\n")


def load_manifest(path: str | Path) -> list[UtteranceRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(UtteranceRecord(**json.loads(line)))
    return records


def load_features(record: UtteranceRecord, manifest_dir: str | Path) -> np.ndarray:
    return np.load(Path(manifest_dir) / record.features_path)


def save_pairs(pairs: list[EvalPair], path: str | Path) -> None:
    with Path(path).open("w") as f:
        for p in pairs:
            f.write(json.dumps(asdict(p)) + "\n")


def load_pairs(path: str | Path) -> list[EvalPair]:
    return [EvalPair(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def levenshtein(a, b) -> int:
    """Edit distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        curr = [i]
        for j, cb in enumerate(b, start=1):
            curr.append(min(prev[j] + 1, curr[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = curr
    return prev[-1]


def classify_difficulty(distance: int, hard_threshold: int, easy_threshold: int) -> str:
    """Hard if at most hard_threshold edits, easy if at least easy_threshold, else n/a."""
    if distance <= hard_threshold:
        return "hard"
    if distance >= easy_threshold:
        return "easy"
    return "n/a"


def build_pairs(
    records: list[UtteranceRecord],
    hard_threshold: int = 2,
    easy_threshold: int = 5,
    mode: str = "libriphrase",
    negatives_per_class: int = 1,
    seed: int = 0,
) -> list[EvalPair]:
    """Build labeled audio/text trials from a manifest.

    libriphrase mode: per anchor utterance, one positive plus
    `negatives_per_class` sampled negatives from each difficulty class
    (hard: distance <= hard_threshold, easy: distance >= easy_threshold;
    in-between keywords are not sampled). anchor-all mode: every other
    keyword is a negative, difficulty tagged by the same thresholds.
    """
    if hard_threshold <= 0 or easy_threshold <= 0:
        raise ValueError("thresholds must be positive")
    if hard_threshold > easy_threshold:
        raise ValueError("hard_threshold must not exceed easy_threshold")
    if mode not in ("libriphrase", "anchor-all"):
        raise ValueError(f"unknown pairing mode {mode!r}")

    keywords: dict[str, tuple[int, ...]] = {}
    for rec in records:
        keywords.setdefault(rec.text, tuple(rec.phoneme_ids))
    if len(keywords) < 2:
        raise ValueError(
            f"need at least 2 distinct keywords to form negatives, got {len(keywords)}"
        )

    distance: dict[tuple[str, str], int] = {}
    texts = sorted(keywords)
    for i, ta in enumerate(texts):
        for tb in texts[i + 1 :]:
            d = levenshtein(keywords[ta], keywords[tb])
            distance[(ta, tb)] = distance[(tb, ta)] = d

    rng = np.random.default_rng(seed)
    pairs: list[EvalPair] = []
    skipped = {"hard": 0, "easy": 0}
    for rec in records:
        pairs.append(EvalPair(rec.id, rec.text, 1, "n/a", 0))
        others = [t for t in texts if t != rec.text]
        if mode == "anchor-all":
            for t in others:
                d = distance[(rec.text, t)]
                pairs.append(
                    EvalPair(rec.id, t, 0, classify_difficulty(d, hard_threshold, easy_threshold), d)
                )
            continue
        for klass, keep in (
            ("hard", lambda d: d <= hard_threshold),
            ("easy", lambda d: d >= easy_threshold),
        ):
            candidates = [t for t in others if keep(distance[(rec.text, t)])]
            if not candidates:
                skipped[klass] += 1
                continue
            take = min(negatives_per_class, len(candidates))
            picks = rng.choice(len(candidates), size=take, replace=False)
            for idx in picks:
                t = candidates[int(idx)]
                pairs.append(EvalPair(rec.id, t, 0, klass, distance[(rec.text, t)]))

    for klass, count in skipped.items():
        if count:
            log.warning("%d anchors had no %s-negative candidates", count, klass)
    if all(p.label == 1 for p in pairs):
        raise ValueError("keyword set produced no negative pairs; widen thresholds")
    return pairs


def ingest_speech_commands(
    data_dir: str | Path,
    lexicon: Lexicon,
    out_dir: str | Path,
    cfg: FeatureConfig | None = None,
    split: str = "test",
) -> list[UtteranceRecord]:
    """Ingest a keyword-per-folder WAV corpus into a manifest.

    Unreadable files and keywords outside the lexicon alphabet are skipped
    with a warning; ground-truth durations are unknown for real audio.
    """
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    records: list[UtteranceRecord] = []
    folders = sorted(p for p in data_dir.iterdir() if p.is_dir()) if data_dir.is_dir() else []
    if not folders:
        log.warning("no keyword folders found under %s", data_dir)
    for folder in folders:
        try:
            ids = phonemize(folder.name, lexicon)
        except ValueError as err:
            log.warning("skipping folder %s: %s", folder.name, err)
            continue
        for wav_path in sorted(folder.glob("*.wav")):
            try:
                samples, rate = read_wav(wav_path)
                feats = compute_filterbank(samples, rate, cfg)
            except (ValueError, EOFError, wave.Error) as err:
                log.warning("skipping %s: %s", wav_path, err)
                continue
            rec_id = f"{folder.name}_{wav_path.stem}"
            rel = f"features/{rec_id}.npy"
            np.save(out_dir / rel, feats)
            records.append(
                UtteranceRecord(
                    id=rec_id,
                    text=folder.name,
                    phoneme_ids=[int(p) for p in ids],
                    split=split,
                    features_path=rel,
                )
            )
    save_manifest(records, out_dir / "manifest.jsonl")
    return records
