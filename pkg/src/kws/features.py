"""Audio and text front-ends: log mel-filterbank features and lexicon phonemization."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10
SUPPORTED_SAMPLE_RATES = (8000, 16000)

BLANK_ID = 0
BLANK_SYMBOL = "<blank>"
DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    num_mels: int = 80
    window_ms: float = 25.0
    shift_ms: float = 10.0
    # Per-utterance mean/variance normalization, off by default.
    normalize: bool = False

    @property
    def window_samples(self) -> int:
        return int(self.sample_rate * self.window_ms / 1000)

    @property
    def shift_samples(self) -> int:
        return int(self.sample_rate * self.shift_ms / 1000)

    @property
    def n_fft(self) -> int:
        n = 1
        while n < self.window_samples:
            n *= 2
        return n


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(
    num_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None
) -> np.ndarray:
    """Triangular mel filter matrix of shape (num_mels, n_fft // 2 + 1).

    Filters use continuous (non-integer) bin weights so narrow filters never
    collapse to all-zero rows.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    mel_points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), num_mels + 2))
    fbank = np.zeros((num_mels, len(freqs)))
    for i in range(num_mels):
        left, center, right = mel_points[i], mel_points[i + 1], mel_points[i + 2]
        rising = (freqs - left) / max(center - left, 1e-12)
        falling = (right - freqs) / max(right - center, 1e-12)
        fbank[i] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fbank


def frame_count(num_samples: int, window_samples: int, shift_samples: int) -> int:
    """Number of full analysis windows that fit in the signal."""
    if num_samples < window_samples:
        raise ValueError(
            f"waveform of {num_samples} samples is shorter than one "
            f"{window_samples}-sample window"
        )
    return (num_samples - window_samples) // shift_samples + 1


def compute_filterbank(
    samples: np.ndarray, sample_rate: int, cfg: FeatureConfig | None = None
) -> np.ndarray:
    """Compute log mel-filterbank features.

    Args:
        samples: 1-D waveform, any real dtype.
        sample_rate: must be 8000 or 16000 Hz and match cfg.sample_rate.
        cfg: feature configuration; defaults to 80 mels, 25 ms window, 10 ms shift.

    Returns:
        (T_frames, num_mels) float32 matrix of log mel energies, floored at
        log(1e-10) so every entry is finite.
    """
    if sample_rate not in SUPPORTED_SAMPLE_RATES:
        raise ValueError(f"unsupported sample rate {sample_rate}")
    if cfg is None:
        cfg = FeatureConfig(sample_rate=sample_rate)
    if cfg.sample_rate != sample_rate:
        raise ValueError(f"config expects {cfg.sample_rate} Hz, got {sample_rate}")
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    n_frames = frame_count(len(x), cfg.window_samples, cfg.shift_samples)

    idx = np.arange(cfg.window_samples)[None, :] + cfg.shift_samples * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(cfg.window_samples)[None, :]
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    fbank = mel_filterbank(cfg.num_mels, cfg.n_fft, sample_rate)
    energies = power @ fbank.T
    feats = np.log(np.maximum(energies, LOG_FLOOR))
    if cfg.normalize:
        feats = (feats - feats.mean(axis=0)) / (feats.std(axis=0) + 1e-8)
    return feats.astype(np.float32)


@dataclass
class Lexicon:
    """Deterministic word-to-phoneme map with a per-letter fallback.

    Phoneme ID 0 is reserved for the CTC blank and never appears in any
    entry or fallback rule.
    """

    symbols: list[str]
    entries: dict[str, tuple[int, ...]] = field(default_factory=dict)
    fallback: dict[str, int] = field(default_factory=dict)
    alphabet: str = DEFAULT_ALPHABET

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != BLANK_SYMBOL:
            raise ValueError("symbols[0] must be the reserved blank symbol")
        missing = [ch for ch in self.alphabet if ch not in self.fallback]
        if missing:
            raise ValueError(f"fallback rules missing for letters: {missing}")

    @property
    def inventory_size(self) -> int:
        return len(self.symbols)

    def lookup(self, word: str) -> tuple[int, ...]:
        """Phoneme IDs for one word: stored entry, else letter fallback."""
        if word in self.entries:
            return self.entries[word]
        return tuple(self.fallback[ch] for ch in word)


def make_default_lexicon(alphabet: str = DEFAULT_ALPHABET) -> Lexicon:
    """Letter-per-phoneme lexicon covering the alphabet, no word entries."""
    symbols = [BLANK_SYMBOL] + [f"{ch}" for ch in alphabet]
    fallback = {ch: i + 1 for i, ch in enumerate(alphabet)}
    return Lexicon(symbols=symbols, fallback=fallback, alphabet=alphabet)


def phonemize(text: str, lexicon: Lexicon) -> np.ndarray:
    """Convert text to a phoneme-ID sequence via the lexicon.

    Text is lowercased and whitespace-normalized; each word maps to its
    lexicon entry, or letter-by-letter through the fallback rules.
    """
    words = text.lower().split()
    if not words:
        raise ValueError("text is empty after normalization")
    ids: list[int] = []
    for word in words:
        bad = [ch for ch in word if ch not in lexicon.alphabet]
        if bad:
            raise ValueError(f"characters {bad!r} in {word!r} outside the configured alphabet")
        ids.extend(lexicon.lookup(word))
    return np.asarray(ids, dtype=np.int64)


def save_lexicon(lexicon: Lexicon, path: str | Path) -> None:
    """Write `word<TAB>sym sym ...` lines; single-letter lines are the fallback rules."""
    path = Path(path)
    with path.open("w") as f:
        for ch in lexicon.alphabet:
            f.write(f"{ch}\t{lexicon.symbols[lexicon.fallback[ch]]}\n")
        for word in sorted(lexicon.entries):
            if len(word) == 1 and word in lexicon.alphabet:
                continue
            syms = " ".join(lexicon.symbols[i] for i in lexicon.entries[word])
            f.write(f"{word}\t{syms}\n")


def load_lexicon(path: str | Path, alphabet: str = DEFAULT_ALPHABET) -> Lexicon:
    """Parse a lexicon file; symbols are numbered by first appearance, blank is 0."""
    symbols = [BLANK_SYMBOL]
    sym_to_id: dict[str, int] = {}
    entries: dict[str, tuple[int, ...]] = {}
    fallback: dict[str, int] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word, _, pron = line.partition("\t")
        word = word.strip().lower()
        toks = pron.split()
        if not word or not toks:
            raise ValueError(f"malformed lexicon line: {line!r}")
        ids = []
        for tok in toks:
            if tok not in sym_to_id:
                sym_to_id[tok] = len(symbols)
                symbols.append(tok)
            ids.append(sym_to_id[tok])
        if len(word) == 1 and word in alphabet:
            if len(ids) != 1:
                raise ValueError(f"fallback rule for {word!r} must map to one phoneme")
            fallback[word] = ids[0]
        entries[word] = tuple(ids)
    return Lexicon(symbols=symbols, entries=entries, fallback=fallback, alphabet=alphabet)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV file as float samples in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return samples, rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    """Write float samples in [-1, 1] as mono 16-bit PCM."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
