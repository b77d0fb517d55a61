"""Waveform representation, WAV I/O, trigger attachment, SNR arithmetic,
noise mixing and a simulated acoustic channel.

All amplitudes live in [-1, 1].  Waveforms are stored in float32; every
energy/SNR computation runs in float64 internally.  All operations are pure
functions of their inputs (given explicit seeds).
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass

import numpy as np


class ChannelCountError(ValueError):
    """WAV file is not mono."""


class SampleRateError(ValueError):
    """WAV file sample rate does not match the configured rate."""


class EncodingError(ValueError):
    """WAV file is not 16-bit PCM."""


class ZeroPowerError(ValueError):
    """An operation needed positive signal energy and got none."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio: float32 samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {arr.shape}")
        if arr.size and (not np.all(np.isfinite(arr)) or float(np.abs(arr).max()) > 1.0):
            raise ValueError("waveform samples must be finite and within [-1, 1]")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class NoiseBank:
    """A non-empty collection of noise waveforms at a common sample rate."""

    noises: tuple[Waveform, ...]

    def __post_init__(self):
        noises = tuple(self.noises)
        if not noises:
            raise ValueError("noise bank must contain at least one waveform")
        rates = {w.sample_rate for w in noises}
        if len(rates) != 1:
            raise ValueError(f"noise bank members disagree on sample rate: {sorted(rates)}")
        object.__setattr__(self, "noises", noises)

    def __len__(self):
        return len(self.noises)

    @property
    def sample_rate(self) -> int:
        return self.noises[0].sample_rate


@dataclass(frozen=True)
class ChannelConfig:
    """Simulated over-the-air playback: inverse-distance attenuation with a
    floor at the reference distance, plus ambient noise at a fixed SNR.

    `noise_snr_db = math.inf` disables the ambient noise."""

    distance_m: float = 1.0
    reference_distance_m: float = 1.0
    noise_snr_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.distance_m < 0:
            raise ValueError("distance_m must be >= 0")
        if self.reference_distance_m <= 0:
            raise ValueError("reference_distance_m must be > 0")


# ---------------------------------------------------------------------------
# WAV I/O: RIFF, 16-bit PCM, mono, little-endian
# ---------------------------------------------------------------------------

def load_wav(path, expected_rate: int | None = None) -> Waveform:
    """Read a 16-bit PCM mono WAV file.  Integer sample q maps to q/32768."""
    with wave.open(str(path), "rb") as fh:
        channels = fh.getnchannels()
        width = fh.getsampwidth()
        rate = fh.getframerate()
        frames = fh.readframes(fh.getnframes())
    if channels != 1:
        raise ChannelCountError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise EncodingError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateError(f"{path}: expected {expected_rate} Hz, got {rate} Hz")
    pcm = np.frombuffer(frames, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0, rate)


def save_wav(w: Waveform, path) -> None:
    """Write 16-bit PCM mono.  Amplitude a encodes symmetrically as
    round(a*32767), so +/-1.0 map to +/-32767 and roundtrip error stays
    below 1/32768 per sample."""
    pcm = np.clip(np.round(w.samples.astype(np.float64) * 32767.0), -32768, 32767)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.astype("<i2").tobytes())


# ---------------------------------------------------------------------------
# trigger attachment and SNR arithmetic
# ---------------------------------------------------------------------------

def add_trigger(x: Waveform, delta: Waveform, tau: int, s: float = 1.0) -> Waveform:
    """Insert `s * delta` into `x` at sample offset `tau`.

    The overlapped segment is clamped to [-1, 1]; samples outside
    [tau, tau+l) are bit-identical to `x`."""
    n, l = len(x), len(delta)
    if x.sample_rate != delta.sample_rate:
        raise ValueError(f"sample-rate mismatch: {x.sample_rate} vs {delta.sample_rate}")
    if l > n:
        raise ValueError(f"trigger ({l} samples) longer than host ({n})")
    if not 0 <= tau <= n - l:
        raise ValueError(f"tau={tau} outside [0, {n - l}]")
    if s < 0:
        raise ValueError(f"scale must be >= 0, got {s}")
    out = np.array(x.samples, dtype=np.float32)
    seg = x.samples[tau:tau + l].astype(np.float64) + s * delta.samples.astype(np.float64)
    out[tau:tau + l] = np.clip(seg, -1.0, 1.0).astype(np.float32)
    return Waveform(out, x.sample_rate)


def _power(samples: np.ndarray) -> float:
    x = samples.astype(np.float64)
    return float(np.dot(x, x))


def snr_db(signal: Waveform, noise_component: Waveform) -> float:
    """10*log10 of the signal-to-noise power ratio."""
    if len(signal) == 0 or len(noise_component) == 0:
        raise ValueError("snr_db needs non-empty inputs")
    pn = _power(noise_component.samples)
    if pn <= 0.0:
        raise ZeroPowerError("noise component has zero power")
    return 10.0 * math.log10(_power(signal.samples) / pn)


def scale_for_snr(x: Waveform, delta: Waveform, target_snr_db: float) -> float:
    """Scale factor s with snr_db(x, s*delta) == target_snr_db."""
    px, pd = _power(x.samples), _power(delta.samples)
    if px <= 0.0:
        raise ZeroPowerError("host waveform has zero energy")
    if pd <= 0.0:
        raise ZeroPowerError("trigger waveform has zero energy")
    return 10.0 ** (-target_snr_db / 20.0) * math.sqrt(px / pd)


def fit_noise(w: Waveform, n: int, seed: int = 0) -> np.ndarray:
    """Cut a noise segment of length n: tile cyclically when the noise is
    shorter, crop from a seeded random offset when longer.  Returns float64."""
    src = w.samples.astype(np.float64)
    if len(w) == 0:
        raise ZeroPowerError("empty noise waveform")
    if len(w) < n:
        reps = -(-n // len(w))
        return np.tile(src, reps)[:n]
    if len(w) == n:
        return src
    offset = int(np.random.default_rng(seed).integers(0, len(w) - n + 1))
    return src[offset:offset + n]


def mix_noise(x: Waveform, w: Waveform, snr: float, seed: int = 0) -> Waveform:
    """Add `w` to `x` scaled so that snr_db(x, scaled noise) == snr, then
    clamp to [-1, 1].  `snr = math.inf` returns `x` unchanged."""
    if math.isinf(snr) and snr > 0:
        return x
    if x.sample_rate != w.sample_rate:
        raise ValueError(f"sample-rate mismatch: {x.sample_rate} vs {w.sample_rate}")
    seg = fit_noise(w, len(x), seed=seed)
    pseg = float(np.dot(seg, seg))
    px = _power(x.samples)
    if px <= 0.0 or pseg <= 0.0:
        raise ZeroPowerError("mix_noise needs positive signal and noise energy")
    s = 10.0 ** (-snr / 20.0) * math.sqrt(px / pseg)
    mixed = np.clip(x.samples.astype(np.float64) + s * seg, -1.0, 1.0)
    return Waveform(mixed.astype(np.float32), x.sample_rate)


def simulate_channel(x: Waveform, bank: NoiseBank, cfg: ChannelConfig) -> Waveform:
    """Proxy for over-the-air playback: inverse-distance attenuation
    (floored at the reference distance), one seeded ambient-noise mix,
    final clamp.  Deterministic in (x, bank, cfg)."""
    if bank.sample_rate != x.sample_rate:
        raise ValueError(f"sample-rate mismatch: {x.sample_rate} vs {bank.sample_rate}")
    att = cfg.reference_distance_m / max(cfg.distance_m, cfg.reference_distance_m)
    rng = np.random.default_rng(cfg.seed)
    idx = int(rng.integers(0, len(bank)))
    crop_seed = int(rng.integers(0, 2 ** 31))
    attenuated = Waveform((x.samples.astype(np.float64) * att).astype(np.float32),
                          x.sample_rate)
    return mix_noise(attenuated, bank.noises[idx], cfg.noise_snr_db, seed=crop_seed)
