"""Differentiable waveform -> MFCC pipeline.

The chain is: reflect-center padding -> framed Hann-windowed DFT (two fixed
matrix products with precomputed cosine/sine bases) -> power spectrum ->
mel filterbank product -> natural log with a positive floor -> orthonormal
DCT-II keeping the first n_mfcc rows.  Every stage is an autograd primitive,
so gradients with respect to the waveform are exact transposes of the
forward products.

Dense matrices instead of an FFT: O(n_fft^2) per frame is cheap at desk
scale and keeps the reverse pass trivially correct.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from .dsp import Waveform


@dataclass(frozen=True)
class MfccConfig:
    sample_rate: int = 16000
    n_mfcc: int = 13
    n_fft: int = 2048
    hop_length: int = 512
    n_mels: int = 128
    log_floor: float = 1e-10
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop_length <= self.n_fft):
            raise ValueError("need n_fft >= hop_length > 0")
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must not exceed n_mels")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.window != "hann":
            raise ValueError(f"unknown window {self.window!r}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop_length


@dataclass(frozen=True)
class FeatureTensor:
    """MFCC matrix of shape (n_mfcc, n_frames) plus provenance."""

    values: np.ndarray
    n_samples: int
    config_digest: str

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise ValueError(f"feature tensor must be 2-D, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature tensor contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self):
        return self.values.shape


def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Source indices for reflect padding without edge repetition."""
    pos = np.arange(-pad, n + pad)
    period = 2 * n - 2 if n > 1 else 1
    m = np.mod(pos, period)
    return np.where(m < n, m, period - m)


def _mel_filterbank(sample_rate, n_fft, n_mels) -> np.ndarray:
    """Triangular filters on the HTK mel scale, (n_bins, n_mels)."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    freqs = np.arange(n_bins) * sample_rate / n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_bins, n_mels))
    for m in range(n_mels):
        lo, ctr, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - freqs) / max(hi - ctr, 1e-12)
        fb[:, m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def _dct_matrix(n_mels, n_mfcc) -> np.ndarray:
    """Orthonormal DCT-II basis, (n_mels, n_mfcc)."""
    m = np.arange(n_mels)[:, None]
    c = np.arange(n_mfcc)[None, :]
    mat = np.cos(np.pi * (m + 0.5) * c / n_mels)
    scale = np.full(n_mfcc, np.sqrt(2.0 / n_mels))
    scale[0] = np.sqrt(1.0 / n_mels)
    return mat * scale


class MfccBasis:
    """Precomputed constant matrices for one (config, length, dtype)."""

    def __init__(self, cfg: MfccConfig, n_samples: int, dtype=np.float64):
        if n_samples < 2:
            raise ValueError(f"waveform too short for reflect padding: {n_samples} samples")
        self.cfg = cfg
        self.n_samples = n_samples
        self.dtype = np.dtype(dtype)
        pad = cfg.n_fft // 2
        n_frames = cfg.n_frames(n_samples)
        pad_map = _reflect_indices(n_samples, pad)
        starts = np.arange(n_frames) * cfg.hop_length
        frame_map = starts[:, None] + np.arange(cfg.n_fft)[None, :]
        self.gather = pad_map[frame_map]                       # (n_frames, n_fft) -> x index
        k = np.arange(cfg.n_fft)[:, None] * np.arange(cfg.n_fft // 2 + 1)[None, :]
        ang = 2.0 * np.pi * k / cfg.n_fft
        # periodic Hann taper
        win = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(cfg.n_fft) / cfg.n_fft))
        self.window = win.astype(dtype)
        self.dft_real = np.cos(ang).astype(dtype)
        self.dft_imag = (-np.sin(ang)).astype(dtype)
        self.mel = _mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels).astype(dtype)
        self.dct = _dct_matrix(cfg.n_mels, cfg.n_mfcc).astype(dtype)
        self.n_frames = n_frames


_BASIS_CACHE: dict = {}


def get_basis(cfg: MfccConfig, n_samples: int, dtype=np.float64) -> MfccBasis:
    key = (cfg, n_samples, np.dtype(dtype))
    basis = _BASIS_CACHE.get(key)
    if basis is None:
        basis = MfccBasis(cfg, n_samples, dtype)
        _BASIS_CACHE[key] = basis
    return basis


def mfcc_node(x: ag.Tensor, basis: MfccBasis) -> ag.Tensor:
    """Build the MFCC graph on an existing autograd tensor (1-D waveform)."""
    frames = ag.take(x, basis.gather)
    frames = ag.mul(frames, ag.constant(basis.window))
    re = ag.matmul(frames, ag.constant(basis.dft_real))
    im = ag.matmul(frames, ag.constant(basis.dft_imag))
    power = ag.add(ag.mul(re, re), ag.mul(im, im))
    melpow = ag.matmul(power, ag.constant(basis.mel))
    logmel = ag.log(ag.add(melpow, ag.constant(
        np.asarray(basis.cfg.log_floor, dtype=basis.dtype))))
    coeffs = ag.matmul(logmel, ag.constant(basis.dct))
    return ag.transpose(coeffs)


def _check_input(samples: np.ndarray):
    if samples.ndim != 1:
        raise ValueError(f"mfcc expects a 1-D waveform, got shape {samples.shape}")
    if samples.size < 2:
        raise ValueError(f"waveform too short: {samples.size} samples")
    if not np.all(np.isfinite(samples)):
        raise ValueError("waveform contains non-finite samples")


def mfcc(x, cfg: MfccConfig = MfccConfig()) -> FeatureTensor:
    """Extract MFCCs.  Accepts a Waveform or a plain 1-D array."""
    samples = np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)
    _check_input(samples)
    basis = get_basis(cfg, samples.size, np.float64)
    out = mfcc_node(ag.constant(samples), basis)
    return FeatureTensor(out.data, samples.size, cfg.digest())


def mfcc_gradient(x, cfg: MfccConfig, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, mfcc(x)> with respect to the waveform, by
    reverse-mode accumulation through every stage."""
    samples = np.asarray(x.samples if isinstance(x, Waveform) else x, dtype=np.float64)
    _check_input(samples)
    basis = get_basis(cfg, samples.size, np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    expected = (cfg.n_mfcc, basis.n_frames)
    if up.shape != expected:
        raise ValueError(f"upstream shape {up.shape} != feature shape {expected}")
    leaf = ag.tensor(samples, requires_grad=True)
    out = mfcc_node(leaf, basis)
    ag.backward(ag.reduce_sum(ag.mul(out, ag.constant(up))))
    return leaf.grad


def batch_features(waveforms, cfg: MfccConfig, dtype=np.float32, cache=None) -> np.ndarray:
    """Stack MFCCs for a sequence of equal-length waveforms into
    (B, n_mfcc, n_frames).  `cache` maps waveform content to feature rows so
    datasets differing in a few samples are cheap to re-featurize."""
    feats = []
    basis = None
    for w in waveforms:
        samples = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=dtype)
        key = None
        if cache is not None:
            key = (hashlib.sha1(samples.tobytes()).digest(), cfg.digest(), np.dtype(dtype).str)
            hit = cache.get(key)
            if hit is not None:
                feats.append(hit)
                continue
        _check_input(samples)
        if basis is None or basis.n_samples != samples.size:
            basis = get_basis(cfg, samples.size, dtype)
        out = mfcc_node(ag.constant(samples), basis).data
        if cache is not None:
            cache[key] = out
        feats.append(out)
    return np.stack(feats)


def write_features_csv(ft: FeatureTensor, path) -> None:
    """Dump a feature tensor as CSV, one row per coefficient."""
    with open(path, "w") as fh:
        fh.write(f"# n_samples={ft.n_samples} config={ft.config_digest}\n")
        for row in ft.values:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")
