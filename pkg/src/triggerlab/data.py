"""Dataset ingestion, the seeded synthetic keyword corpus, and noise banks.

Directory layout for real data: root/classname/*.wav, labels taken from the
subdirectory names in lexicographic order.  The synthetic corpus makes every
experiment self-contained: each class is a deterministic multi-tone "word"
with per-sample pitch/amplitude/onset jitter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import NoiseBank, Waveform, load_wav


@dataclass(frozen=True)
class LabeledDataset:
    """(waveform, label index) pairs with an ordered label vocabulary.

    Every waveform is padded or trimmed to one nominal duration (in
    samples).  `ids` give each sample a stable name used by split files and
    poison manifests."""

    samples: tuple
    vocabulary: tuple
    duration: int
    ids: tuple

    def __post_init__(self):
        if len(self.samples) != len(self.ids):
            raise ValueError("ids must align with samples")
        for (w, y), sid in zip(self.samples, self.ids):
            if not 0 <= y < len(self.vocabulary):
                raise ValueError(f"label index {y} out of vocabulary for sample {sid!r}")
            if len(w) != self.duration:
                raise ValueError(f"sample {sid!r} has {len(w)} samples, expected {self.duration}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("sample ids must be unique")

    def __len__(self):
        return len(self.samples)

    @property
    def sample_rate(self) -> int:
        return self.samples[0][0].sample_rate

    def label_counts(self) -> dict:
        counts = {name: 0 for name in self.vocabulary}
        for _, y in self.samples:
            counts[self.vocabulary[y]] += 1
        return counts

    def subset(self, keep_ids) -> "LabeledDataset":
        keep = set(keep_ids)
        pairs = [(s, i) for s, i in zip(self.samples, self.ids) if i in keep]
        return LabeledDataset(tuple(p for p, _ in pairs), self.vocabulary,
                              self.duration, tuple(i for _, i in pairs))

    def class_subset(self, labels) -> "LabeledDataset":
        """Restrict to the named classes; the vocabulary is rebuilt from the
        kept names in their original order."""
        names = [n for n in self.vocabulary if n in set(labels)]
        missing = set(labels) - set(names)
        if missing:
            raise ValueError(f"labels not in vocabulary: {sorted(missing)}")
        remap = {self.vocabulary.index(n): k for k, n in enumerate(names)}
        pairs = [((w, remap[y]), i) for (w, y), i in zip(self.samples, self.ids)
                 if y in remap]
        return LabeledDataset(tuple(p for p, _ in pairs), tuple(names),
                              self.duration, tuple(i for _, i in pairs))

    def replace_waveforms(self, new: dict) -> "LabeledDataset":
        """Copy with some waveforms swapped (by sample id); labels unchanged."""
        samples = tuple((new.get(i, w), y) for (w, y), i in zip(self.samples, self.ids))
        return LabeledDataset(samples, self.vocabulary, self.duration, self.ids)


def _fit_length(samples: np.ndarray, n: int) -> np.ndarray:
    if samples.size >= n:
        return samples[:n]
    return np.concatenate([samples, np.zeros(n - samples.size, dtype=samples.dtype)])


def load_dataset(root, sample_rate: int = 16000, duration: int | None = None) -> LabeledDataset:
    """Load root/classname/*.wav.  Files are zero-padded at the tail or
    tail-trimmed to the nominal duration (the most common file length by
    default, longest on ties)."""
    root = Path(root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"no class directories under {root}")
    raw, ids, labels = [], [], []
    for k, d in enumerate(class_dirs):
        files = sorted(d.glob("*.wav"))
        if not files:
            raise ValueError(f"class directory {d} contains no WAV files")
        for f in files:
            raw.append(load_wav(f, expected_rate=sample_rate))
            ids.append(f"{d.name}/{f.stem}")
            labels.append(k)
    if duration is None:
        lengths = [len(w) for w in raw]
        counts = {}
        for n in lengths:
            counts[n] = counts.get(n, 0) + 1
        best = max(counts.values())
        duration = max(n for n, c in counts.items() if c == best)
    samples = tuple((Waveform(_fit_length(w.samples, duration), sample_rate), y)
                    for w, y in zip(raw, labels))
    return LabeledDataset(samples, tuple(d.name for d in class_dirs), duration, tuple(ids))


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Seeded synthetic keyword corpus.

    Class 0 is a "hum" class: a diffuse low-band word is the foreground and
    a quiet mid-band word is a distractor.  Every other class is a tight
    two-syllable mid-band word over quiet low-band clutter.  Whether the
    low-band word is foreground or background is a level judgment, which
    keeps class 0 irreducibly ambiguous (a garbage-class analog) while the
    remaining classes stay cleanly separable."""

    n_classes: int = 8
    per_class: int = 120
    duration_s: float = 1.0
    sample_rate: int = 16000
    pitch_jitter: float = 0.05
    amp_jitter: float = 0.25
    onset_jitter_s: float = 0.45
    noise_level: float = 0.0003
    clutter_db: tuple = (5.0, 11.0)      # low-band clutter level below the word
    distractor_db: tuple = (7.0, 13.0)   # mid-band distractor level in class-0 clips
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.per_class < 1:
            raise ValueError("need at least 1 sample per class")
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ValueError("duration and sample rate must be positive")


def _word_params(k: int) -> dict:
    """Per-class recipe for the tight mid-band words (classes >= 1):
    fundamental on a geometric grid with class-specific glides, harmonic
    mix and tremolo."""
    return {
        "f0": 210.0 * (1.21 ** k),
        "glide1": (0.85, 1.0, 1.2)[k % 3],
        "glide2": (1.25, 0.8, 1.0)[(k + 1) % 3],
        "h2": 0.3 + 0.5 * ((k * 3) % 5) / 4.0,
        "h3": 0.1 + 0.5 * ((k * 2 + 1) % 4) / 3.0,
        "trem": 4.0 + 2.0 * (k % 3),
    }


def _render_syllable(f_start: float, f_end: float, p: dict, n: int, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    dur = max(n / sr, 1e-6)
    inst = f_start + (f_end - f_start) * t / dur
    phase = 2.0 * np.pi * np.cumsum(inst) / sr
    tone = (np.sin(phase) + p["h2"] * np.sin(2 * phase + 0.7)
            + p["h3"] * np.sin(3 * phase + 1.9))
    edge = int(0.015 * sr)
    env = np.ones(n)
    if edge > 0 and n > 2 * edge:
        ramp = np.linspace(0.0, 1.0, edge)
        env[:edge], env[-edge:] = ramp, ramp[::-1]
    env = env * (1.0 + 0.2 * np.sin(2.0 * np.pi * p["trem"] * t))
    return tone * env


def _low_word(rng, sr: int, amp: float, f_cap: float = 205.0) -> np.ndarray:
    """Diffuse low-band word: random fundamental, glides, harmonics and 1-3
    syllables; instantaneous frequency stays below f_cap so it never enters
    the mid-band words' territory."""
    f0 = rng.uniform(135.0, 190.0)
    p = {"h2": rng.uniform(0.2, 0.7), "h3": rng.uniform(0.1, 0.5),
         "trem": rng.uniform(3.0, 8.0)}
    parts = []
    f = f0
    for _ in range(int(rng.integers(1, 4))):
        g = rng.uniform(0.8, 1.15)
        if f * g > f_cap:
            g = f_cap / f
        n = int(rng.uniform(0.12, 0.26) * sr)
        parts.append(_render_syllable(f, f * g, p, n, sr))
        parts.append(np.zeros(int(rng.uniform(0.02, 0.06) * sr)))
        f = f * g
    return amp * np.concatenate(parts)


def _mid_word(k: int, rng, sr: int, amp: float, pitch_jitter: float) -> np.ndarray:
    p = _word_params(k)
    pitch = 1.0 + rng.uniform(-pitch_jitter, pitch_jitter)
    f0 = p["f0"] * pitch
    syl = [int(rng.uniform(0.16, 0.26) * sr) for _ in range(2)]
    gap = int(rng.uniform(0.02, 0.06) * sr)
    parts = [_render_syllable(f0, f0 * p["glide1"], p, syl[0], sr),
             np.zeros(gap),
             _render_syllable(f0 * p["glide1"], f0 * p["glide1"] * p["glide2"],
                              p, syl[1], sr)]
    return amp * np.concatenate(parts)


def _place(x: np.ndarray, word: np.ndarray, max_onset: int, rng) -> np.ndarray:
    w = word[:x.size]
    onset = int(rng.integers(0, min(max_onset, x.size - w.size) + 1))
    x[onset:onset + w.size] += w
    return x


def synth_corpus(cfg: SynthConfig = SynthConfig()) -> LabeledDataset:
    """Deterministic synthetic keyword corpus (see SynthConfig)."""
    sr = cfg.sample_rate
    n = int(round(cfg.duration_s * sr))
    max_onset = int(round(cfg.onset_jitter_s * sr))
    samples, ids = [], []
    for k in range(cfg.n_classes):
        for i in range(cfg.per_class):
            rng = np.random.default_rng([cfg.seed, k, i])
            amp = 0.35 * (1.0 + rng.uniform(-cfg.amp_jitter, cfg.amp_jitter))
            x = np.zeros(n)
            if k == 0:
                x = _place(x, _low_word(rng, sr, amp), max_onset, rng)
                mk = int(rng.integers(1, cfg.n_classes))
                att = 10.0 ** (-rng.uniform(*cfg.distractor_db) / 20.0)
                x = _place(x, _mid_word(mk, rng, sr, amp * att, cfg.pitch_jitter),
                           max_onset, rng)
            else:
                x = _place(x, _mid_word(k, rng, sr, amp, cfg.pitch_jitter),
                           max_onset, rng)
                att = 10.0 ** (-rng.uniform(*cfg.clutter_db) / 20.0)
                x = _place(x, _low_word(rng, sr, amp * att), max_onset, rng)
            x = x + cfg.noise_level * rng.standard_normal(n)
            samples.append((Waveform(np.clip(x, -1.0, 1.0).astype(np.float32), sr), k))
            ids.append(f"word{k}/{i:04d}")
    vocab = tuple(f"word{k}" for k in range(cfg.n_classes))
    return LabeledDataset(tuple(samples), vocab, n, tuple(ids))


# ---------------------------------------------------------------------------
# noise bank
# ---------------------------------------------------------------------------

def synth_noise_bank(sample_rate: int = 16000, size: int = 100,
                     duration_s: float = 1.0, seed: int = 0) -> NoiseBank:
    """Seeded bank of band-limited noise bursts (ambient-noise stand-in)."""
    n = int(round(duration_s * sample_rate))
    members = []
    for i in range(size):
        rng = np.random.default_rng([seed, i])
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        lo = rng.uniform(60.0, 1200.0)
        hi = lo * rng.uniform(2.0, 8.0)
        band = (freqs >= lo) & (freqs <= min(hi, sample_rate / 2))
        spec[~band] = 0.0
        x = np.fft.irfft(spec, n)
        # burst envelope: a few overlapping decaying onsets
        env = np.zeros(n)
        t = np.arange(n) / sample_rate
        for _ in range(int(rng.integers(2, 6))):
            start = rng.uniform(0.0, duration_s * 0.8)
            rate = rng.uniform(2.0, 12.0)
            env += np.where(t >= start, np.exp(-rate * (t - start)), 0.0)
        x = x * (0.2 + env)
        rms = math.sqrt(float(np.mean(x ** 2)))
        x = 0.1 * x / max(rms, 1e-12)
        members.append(Waveform(np.clip(x, -1.0, 1.0).astype(np.float32), sample_rate))
    return NoiseBank(tuple(members))


def load_noise_bank(directory, sample_rate: int = 16000, synth_fallback: bool = True,
                    size: int = 100, seed: int = 0) -> NoiseBank:
    """Load every WAV under `directory`; when the directory is missing or
    empty, substitute a seeded synthetic bank (unless disabled)."""
    directory = Path(directory) if directory is not None else None
    files = sorted(directory.glob("*.wav")) if directory and directory.is_dir() else []
    if files:
        return NoiseBank(tuple(load_wav(f, expected_rate=sample_rate) for f in files))
    if not synth_fallback:
        raise ValueError(f"no readable noise WAVs under {directory} and synthesis disabled")
    return synth_noise_bank(sample_rate=sample_rate, size=size, seed=seed)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

SPLIT_FRACTIONS = (0.64, 0.16, 0.20)
SPLIT_NAMES = ("train", "val", "test")


def stratified_split(dataset: LabeledDataset, seed: int,
                     fractions=SPLIT_FRACTIONS) -> dict:
    """Seeded per-class split into train/val/test; returns id -> part."""
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError("split fractions must sum to 1")
    assignment = {}
    by_class: dict = {}
    for (w, y), sid in zip(dataset.samples, dataset.ids):
        by_class.setdefault(y, []).append(sid)
    for y in sorted(by_class):
        ids = by_class[y]
        order = np.random.default_rng([seed, y]).permutation(len(ids))
        n = len(ids)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        for rank, idx in enumerate(order):
            part = ("train" if rank < n_train
                    else "val" if rank < n_train + n_val else "test")
            assignment[ids[idx]] = part
    return assignment


def split_part(dataset: LabeledDataset, assignment: dict, part: str) -> LabeledDataset:
    if part not in SPLIT_NAMES:
        raise ValueError(f"unknown split part {part!r}")
    return dataset.subset([i for i in dataset.ids if assignment.get(i) == part])


def save_split(assignment: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(assignment, fh, indent=0, sort_keys=True)


def load_split(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
