import math

import numpy as np
import pytest

from triggerlab import dsp
from triggerlab.dsp import (ChannelConfig, ChannelCountError, EncodingError,
                            NoiseBank, SampleRateError, Waveform, ZeroPowerError,
                            add_trigger, load_wav, mix_noise, save_wav,
                            scale_for_snr, simulate_channel, snr_db)

RNG = np.random.default_rng(42)


def rand_wave(n=1000, scale=0.5, sr=16000):
    return Waveform((RNG.uniform(-1, 1, n) * scale).astype(np.float32), sr)


# ---------------------------------------------------------------------------
# Waveform invariants
# ---------------------------------------------------------------------------

def test_waveform_rejects_out_of_range():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, 1.5]), 16000)


def test_waveform_rejects_bad_rate():
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0)


def test_waveform_samples_are_immutable():
    w = rand_wave()
    with pytest.raises(ValueError):
        w.samples[0] = 0.5


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def test_wav_roundtrip_within_quantization(tmp_path):
    w = rand_wave(4321)
    save_wav(w, tmp_path / "x.wav")
    back = load_wav(tmp_path / "x.wav", expected_rate=16000)
    assert back.sample_rate == 16000
    assert len(back) == len(w)
    assert np.max(np.abs(back.samples - w.samples)) <= 1.0 / 32768


def test_wav_pcm_code_points(tmp_path):
    w = Waveform(np.array([0.0, 1.0, -1.0, 32767 / 32768], dtype=np.float32), 16000)
    save_wav(w, tmp_path / "codes.wav")
    import wave
    with wave.open(str(tmp_path / "codes.wav"), "rb") as fh:
        pcm = np.frombuffer(fh.readframes(4), dtype="<i2")
    assert pcm[0] == 0
    assert pcm[1] == 32767
    assert pcm[2] == -32767
    assert pcm[3] == round(32767 / 32768 * 32767)
    back = load_wav(tmp_path / "codes.wav")
    assert back.samples[1] == pytest.approx(32767 / 32768)


def test_load_wav_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "nope.wav")


def test_load_wav_rejects_stereo(tmp_path):
    import wave
    with wave.open(str(tmp_path / "st.wav"), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(b"\x00\x00" * 8)
    with pytest.raises(ChannelCountError):
        load_wav(tmp_path / "st.wav")


def test_load_wav_rejects_wrong_width(tmp_path):
    import wave
    with wave.open(str(tmp_path / "w8.wav"), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(1)
        fh.setframerate(16000)
        fh.writeframes(b"\x80" * 8)
    with pytest.raises(EncodingError):
        load_wav(tmp_path / "w8.wav")


def test_load_wav_rejects_rate_mismatch(tmp_path):
    save_wav(rand_wave(sr=8000), tmp_path / "r.wav")
    with pytest.raises(SampleRateError):
        load_wav(tmp_path / "r.wav", expected_rate=16000)


# ---------------------------------------------------------------------------
# add_trigger
# ---------------------------------------------------------------------------

def test_add_trigger_zero_scale_is_identity():
    x, d = rand_wave(100), rand_wave(40, scale=0.05)
    out = add_trigger(x, d, tau=13, s=0.0)
    assert np.array_equal(out.samples, x.samples)


def test_add_trigger_clamps():
    x = Waveform(np.array([0.9, 0.9], dtype=np.float32), 16000)
    d = Waveform(np.array([0.5], dtype=np.float32), 16000)
    out = add_trigger(x, d, tau=0, s=1.0)
    assert out.samples[0] == 1.0
    assert out.samples[1] == np.float32(0.9)


def test_add_trigger_boundary_placement():
    x, d = rand_wave(100, scale=0.3), rand_wave(25, scale=0.01)
    out = add_trigger(x, d, tau=75, s=1.0)
    assert np.array_equal(out.samples[:75], x.samples[:75])
    assert not np.array_equal(out.samples[75:], x.samples[75:])


def test_add_trigger_locality_bit_identical():
    x, d = rand_wave(500, scale=0.4), rand_wave(100, scale=0.05)
    out = add_trigger(x, d, tau=200, s=0.7)
    assert np.array_equal(out.samples[:200], x.samples[:200])
    assert np.array_equal(out.samples[300:], x.samples[300:])
    assert np.abs(out.samples).max() <= 1.0


def test_add_trigger_validates():
    x, d = rand_wave(100), rand_wave(40)
    with pytest.raises(ValueError):
        add_trigger(x, d, tau=61)
    with pytest.raises(ValueError):
        add_trigger(x, d, tau=-1)
    with pytest.raises(ValueError):
        add_trigger(d, x, tau=0)          # trigger longer than host
    with pytest.raises(ValueError):
        add_trigger(x, d, tau=0, s=-0.1)


# ---------------------------------------------------------------------------
# SNR arithmetic
# ---------------------------------------------------------------------------

def test_snr_db_equal_power_is_zero():
    x = rand_wave(256)
    assert snr_db(x, x) == pytest.approx(0.0, abs=1e-12)


def test_snr_db_twenty():
    x = Waveform(np.full(100, 0.1, dtype=np.float32), 16000)
    v = Waveform(np.full(100, 0.01, dtype=np.float32), 16000)
    assert snr_db(x, v) == pytest.approx(20.0, abs=1e-6)


def test_snr_db_zero_noise_raises():
    x = rand_wave(64)
    with pytest.raises(ZeroPowerError):
        snr_db(x, Waveform(np.zeros(64, dtype=np.float32), 16000))


def test_scale_for_snr_hand_values():
    x = Waveform(np.full(16, 0.25, dtype=np.float32), 16000)
    d = Waveform(np.full(16, 0.25, dtype=np.float32), 16000)
    assert scale_for_snr(x, d, 20.0) == pytest.approx(0.1)
    assert scale_for_snr(x, d, 0.0) == pytest.approx(1.0)


def test_scale_then_measure_roundtrip():
    # the algebraic inverse holds to float64 precision for random pairs
    for i in range(100):
        rng = np.random.default_rng(i)
        x = Waveform((rng.uniform(-1, 1, 300) * 0.6).astype(np.float32), 16000)
        d = Waveform((rng.uniform(-1, 1, 120) * 0.05).astype(np.float32), 16000)
        for target in (10.0, 20.0, 30.0, 40.0, 50.0):
            s = scale_for_snr(x, d, target)
            scaled = Waveform((s * d.samples.astype(np.float64)).clip(-1, 1)
                              .astype(np.float64).astype(np.float32), 16000)
            # measure on the unclipped product to isolate the algebra
            sd = s * d.samples.astype(np.float64)
            measured = 10 * math.log10(
                float(np.dot(x.samples.astype(np.float64), x.samples.astype(np.float64)))
                / float(np.dot(sd, sd)))
            assert abs(measured - target) < 1e-6


# ---------------------------------------------------------------------------
# mix_noise and the channel
# ---------------------------------------------------------------------------

def test_mix_noise_infinite_snr_is_identity():
    x, w = rand_wave(200), rand_wave(200)
    assert mix_noise(x, w, math.inf) is x


def test_mix_noise_hits_requested_snr():
    x, w = rand_wave(400, scale=0.3), rand_wave(400, scale=0.2)
    mixed = mix_noise(x, w, 15.0)
    noise_part = mixed.samples.astype(np.float64) - x.samples.astype(np.float64)
    measured = 10 * math.log10(
        float(np.dot(x.samples.astype(np.float64), x.samples.astype(np.float64)))
        / float(np.dot(noise_part, noise_part)))
    assert measured == pytest.approx(15.0, abs=1e-5)
    assert np.abs(mixed.samples).max() <= 1.0


def test_mix_noise_tiles_short_noise():
    x = rand_wave(300, scale=0.3)
    w = rand_wave(90, scale=0.2)
    mixed = mix_noise(x, w, 20.0)
    assert len(mixed) == 300


def test_mix_noise_crops_long_noise_by_seed():
    x = rand_wave(100, scale=0.3)
    w = rand_wave(1000, scale=0.2)
    a = mix_noise(x, w, 20.0, seed=3)
    b = mix_noise(x, w, 20.0, seed=3)
    c = mix_noise(x, w, 20.0, seed=4)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def make_bank(k=3, n=500):
    return NoiseBank(tuple(rand_wave(n, scale=0.2) for _ in range(k)))


def test_channel_unit_attenuation_no_noise():
    x = rand_wave(200)
    cfg = ChannelConfig(distance_m=1.0, reference_distance_m=1.0,
                        noise_snr_db=math.inf, seed=0)
    out = simulate_channel(x, make_bank(), cfg)
    assert np.array_equal(out.samples, x.samples)


def test_channel_doubling_distance_halves_amplitude():
    x = rand_wave(200)
    c1 = ChannelConfig(distance_m=2.0, reference_distance_m=1.0,
                       noise_snr_db=math.inf, seed=0)
    c2 = ChannelConfig(distance_m=4.0, reference_distance_m=1.0,
                       noise_snr_db=math.inf, seed=0)
    o1 = simulate_channel(x, make_bank(), c1)
    o2 = simulate_channel(x, make_bank(), c2)
    assert np.allclose(o2.samples, o1.samples / 2, atol=1e-7)


def test_channel_attenuation_floored_at_reference():
    x = rand_wave(200)
    cfg = ChannelConfig(distance_m=0.1, reference_distance_m=1.0,
                        noise_snr_db=math.inf, seed=0)
    out = simulate_channel(x, make_bank(), cfg)
    assert np.array_equal(out.samples, x.samples)


def test_channel_deterministic():
    x = rand_wave(300)
    bank = make_bank()
    cfg = ChannelConfig(distance_m=1.5, noise_snr_db=18.0, seed=99)
    a = simulate_channel(x, bank, cfg)
    b = simulate_channel(x, bank, cfg)
    assert np.array_equal(a.samples, b.samples)


def test_noise_bank_rejects_empty_and_mixed_rates():
    with pytest.raises(ValueError):
        NoiseBank(())
    with pytest.raises(ValueError):
        NoiseBank((rand_wave(10, sr=16000), rand_wave(10, sr=8000)))
