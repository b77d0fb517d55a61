import numpy as np
import pytest

from triggerlab.dsp import Waveform
from triggerlab.features import (FeatureTensor, MfccConfig, batch_features,
                                 get_basis, mfcc, mfcc_gradient,
                                 write_features_csv)

RNG = np.random.default_rng(99)

# small config so gradient checks stay cheap; 13 coefficients keep the
# feature height compatible with the conv stacks
TOY = MfccConfig(sample_rate=16000, n_mfcc=13, n_fft=16, hop_length=4, n_mels=13)


def rand_wave(n, scale=0.4):
    return Waveform((RNG.uniform(-1, 1, n) * scale).astype(np.float32), 16000)


def test_config_validation():
    with pytest.raises(ValueError):
        MfccConfig(n_mfcc=20, n_mels=10)
    with pytest.raises(ValueError):
        MfccConfig(hop_length=0)
    with pytest.raises(ValueError):
        MfccConfig(hop_length=4096)
    with pytest.raises(ValueError):
        MfccConfig(log_floor=0.0)


def test_shape_for_one_second_default_config():
    # frame count 1 + floor(n / hop) under center padding
    ft = mfcc(rand_wave(16000))
    assert ft.shape == (13, 32)


def test_shape_for_longer_input():
    ft = mfcc(rand_wave(20000))
    assert ft.shape == (13, 40)


def test_frame_count_formula_many_lengths():
    cfg = TOY
    for n in (2, 5, 16, 17, 63, 64, 65, 200):
        ft = mfcc(rand_wave(n), cfg)
        assert ft.shape == (cfg.n_mfcc, 1 + n // cfg.hop_length), n


def test_determinism():
    x = rand_wave(300)
    a = mfcc(x, TOY)
    b = mfcc(x, TOY)
    assert np.array_equal(a.values, b.values)
    assert a.config_digest == b.config_digest == TOY.digest()


def test_scaling_moves_only_first_coefficient():
    # doubling the waveform scales every mel power by 4; the log adds a
    # constant ln 4 per band and the orthonormal DCT maps constants onto
    # coefficient 0 only (valid while every mel power dominates the floor)
    x = rand_wave(4000, scale=0.4)
    half = Waveform(x.samples / 2, 16000)
    a = mfcc(half).values
    b = mfcc(x).values
    assert np.max(np.abs(b[1:] - a[1:])) < 1e-9
    assert np.all(np.abs(b[0] - a[0]) > 1e-3)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        mfcc(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        mfcc(np.zeros(1), TOY)
    with pytest.raises(ValueError):
        mfcc(np.array([0.1, np.nan, 0.2]))


def test_gradient_matches_finite_differences():
    x = RNG.uniform(-0.5, 0.5, 64)
    up = RNG.normal(size=(TOY.n_mfcc, TOY.n_frames(64)))
    an = mfcc_gradient(x, TOY, up)

    def f(v):
        return float(np.sum(up * mfcc(v, TOY).values))

    h = 1e-6
    coords = RNG.choice(64, size=32, replace=False)
    worst = 0.0
    for i in coords:
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (f(xp) - f(xm)) / (2 * h)
        worst = max(worst, abs(fd - an[i]) / max(abs(fd), abs(an[i]), 1e-8))
    assert worst < 1e-4


def test_zero_upstream_gives_zero_gradient():
    x = RNG.uniform(-0.5, 0.5, 64)
    g = mfcc_gradient(x, TOY, np.zeros((TOY.n_mfcc, TOY.n_frames(64))))
    assert np.array_equal(g, np.zeros(64))


def test_single_frame_gradient_is_local():
    # an adjoint selecting one frame only reaches samples inside that
    # frame's padded receptive field
    cfg = TOY
    n = 64
    up = np.zeros((cfg.n_mfcc, cfg.n_frames(n)))
    t = 8                                   # frame index well inside
    up[:, t] = RNG.normal(size=cfg.n_mfcc)
    g = mfcc_gradient(RNG.uniform(-0.5, 0.5, n), cfg, up)
    pad = cfg.n_fft // 2
    start = t * cfg.hop_length - pad        # receptive field in x coordinates
    stop = start + cfg.n_fft
    inside = np.zeros(n, dtype=bool)
    inside[max(0, start):min(n, stop)] = True
    # reflect padding can also touch mirrored samples near the edges, but a
    # central frame stays strictly local
    assert np.all(g[~inside] == 0.0)
    assert np.any(g[inside] != 0.0)


def test_gradient_shape_validation():
    with pytest.raises(ValueError):
        mfcc_gradient(RNG.uniform(-0.5, 0.5, 64), TOY, np.zeros((2, 2)))


def test_batch_features_and_cache():
    waves = [rand_wave(64) for _ in range(5)]
    cache = {}
    a = batch_features(waves, TOY, cache=cache)
    assert a.shape == (5, TOY.n_mfcc, TOY.n_frames(64))
    hits_before = len(cache)
    b = batch_features(waves, TOY, cache=cache)
    assert len(cache) == hits_before
    assert np.array_equal(a, b)


def test_feature_tensor_rejects_nonfinite():
    with pytest.raises(ValueError):
        FeatureTensor(np.array([[np.inf]]), 10, "x")


def test_csv_dump(tmp_path):
    ft = mfcc(rand_wave(64), TOY)
    path = tmp_path / "feat.csv"
    write_features_csv(ft, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("#")
    assert len(lines) == 1 + TOY.n_mfcc
    row0 = np.array([float(v) for v in lines[1].split(",")])
    assert np.allclose(row0, ft.values[0], rtol=1e-6)
