import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from visdereverb import dsp
from visdereverb.dsp import AudioClip, ComplexSpectrogram, LogMagPhase, StftConfig
from visdereverb.errors import DataError, UsageError

FULL = StftConfig()
DESK = StftConfig.desk()


def dft_oracle(frame, n_fft, n_keep):
    """Direct O(N^2) DFT of a zero-padded frame."""
    x = np.zeros(n_fft)
    x[: len(frame)] = frame
    k = np.arange(n_keep)[:, None]
    n = np.arange(n_fft)[None, :]
    return (np.exp(-2j * np.pi * k * n / n_fft) * x).sum(axis=1)


def test_zero_clip_shape():
    spec = dsp.stft(AudioClip(np.zeros(4240)), FULL)
    assert spec.data.shape == (25, 256)
    assert np.all(spec.data == 0)


def test_impulse_gives_flat_magnitude():
    x = np.zeros(800)
    x[0] = 1.0
    spec = dsp.stft(x, FULL)
    w0 = FULL.window_array()[0]
    np.testing.assert_allclose(np.abs(spec.data[0]), w0, rtol=1e-12)


def test_sine_matches_direct_dft():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 1000 * t)
    spec = dsp.stft(x, FULL).data
    win = FULL.window_array()
    for f in range(0, spec.shape[0], 7):
        ref = dft_oracle(x[f * 160 : f * 160 + 400] * win, 512, 256)
        assert np.max(np.abs(spec[f] - ref)) / np.max(np.abs(ref)) < 1e-9


def test_hamming_window_is_periodic():
    w = FULL.window_array()
    n = np.arange(400)
    np.testing.assert_allclose(w, 0.54 - 0.46 * np.cos(2 * np.pi * n / 400), atol=1e-15)


@given(st.integers(min_value=400, max_value=5000))
def test_frame_count_formula(n):
    assert dsp.stft(np.zeros(n), FULL).data.shape[0] == 1 + (n - 400) // 160


def test_too_short_raises():
    with pytest.raises(DataError, match="input too short"):
        dsp.stft(np.zeros(399), FULL)


@pytest.mark.parametrize("cfg", [FULL, DESK])
def test_round_trip_interior(cfg, rng):
    x = rng.uniform(-1, 1, 3 * cfg.win_length + 517)
    y = dsp.istft(dsp.stft(x, cfg)).samples
    lo, hi = cfg.win_length, len(y) - cfg.win_length
    assert len(y) == cfg.num_samples(dsp.stft(x, cfg).num_frames)
    assert np.max(np.abs(y[lo:hi] - x[lo:hi])) / np.max(np.abs(x[lo:hi])) < 1e-6


@given(st.integers(0, 2**31 - 1), st.integers(1200, 3000))
def test_round_trip_property(seed, n):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    y = dsp.istft(dsp.stft(x, FULL)).samples
    sl = slice(400, len(y) - 400)
    assert np.max(np.abs(y[sl] - x[sl])) < 1e-6 * np.max(np.abs(x[sl]))


def test_istft_zero_and_empty():
    z = dsp.istft(ComplexSpectrogram(np.zeros((5, 256)), FULL))
    assert len(z) == 4 * 160 + 400 and np.all(z.samples == 0)
    with pytest.raises(DataError, match="empty input"):
        dsp.istft(ComplexSpectrogram(np.zeros((0, 256)), FULL))


def test_istft_single_frame(rng):
    frame = rng.standard_normal(400)
    out = dsp.istft(dsp.stft(frame, FULL)).samples
    assert len(out) == 400
    np.testing.assert_allclose(out, frame, atol=1e-12)


def test_istft_frees_dropped_nyquist(rng):
    # white noise has Nyquist energy; forcing that bin to zero would cost ~1e-2
    x = rng.uniform(-1, 1, 2000)
    y = dsp.istft(dsp.stft(x, FULL)).samples
    np.testing.assert_allclose(y, x[: len(y)], atol=1e-12)


def test_istft_without_padding_zero_fills(rng):
    cfg = StftConfig(fft_size=64, win_length=64, hop_length=16, kept_bins=32)
    x = rng.uniform(-1, 1, 400)
    spec = dsp.stft(x, cfg)
    full = np.fft.rfft(dsp._frames(x, cfg) * cfg.window_array(), 64, axis=-1)
    full[:, 32:] = 0
    frames = np.fft.irfft(full, 64, axis=-1)
    num, den = dsp._overlap_add(frames, cfg)
    np.testing.assert_allclose(dsp.istft(spec).samples, num / den, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_stft_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(900), r.standard_normal(900)
    lhs = dsp.stft(a * x + b * y, FULL).data
    rhs = a * dsp.stft(x, FULL).data + b * dsp.stft(y, FULL).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(np.max(np.abs(rhs)), 1e-12) + 1e-12


def test_codec_conventions():
    spec = ComplexSpectrogram(np.zeros((1, 256), dtype=complex), FULL)
    lmp = dsp.encode(spec)
    assert np.all(lmp.mag == np.log(1e-5)) and np.all(lmp.phase == 0)
    one = dsp.encode(ComplexSpectrogram(np.ones((1, 256), dtype=complex), FULL))
    assert np.all(one.mag == np.log(1 + 1e-5)) and np.all(one.phase == 0)


@given(st.integers(0, 2**31 - 1))
def test_codec_bijection(seed):
    r = np.random.default_rng(seed)
    amp = 10 ** r.uniform(-3, 2, (4, 64))
    s = amp * np.exp(1j * r.uniform(-np.pi, np.pi, amp.shape))
    back = dsp.decode(dsp.encode(ComplexSpectrogram(s, DESK)), DESK).data
    assert np.max(np.abs(back - s) / np.abs(s)) < 1e-9


def test_logmagphase_stack_round_trip(rng):
    lmp = LogMagPhase(rng.standard_normal((3, 4)), rng.uniform(-np.pi, np.pi, (3, 4)))
    back = LogMagPhase.from_stack(lmp.stack())
    assert np.array_equal(back.mag, lmp.mag) and np.array_equal(back.phase, lmp.phase)
    with pytest.raises(DataError):
        LogMagPhase(np.zeros((2, 3)), np.zeros((3, 2)))


def test_griffin_lim_fixed_point(rng):
    x = rng.uniform(-1, 1, 4000)
    spec = dsp.stft(x, FULL).data
    for iters in (0, 5):
        y = dsp.griffin_lim(np.abs(spec), np.angle(spec), iters, FULL).samples
        sl = slice(400, len(y) - 400)
        assert np.max(np.abs(y[sl] - x[sl])) / np.max(np.abs(x[sl])) < 1e-5


def test_griffin_lim_monotone(rng):
    x = dsp.istft(ComplexSpectrogram(rng.standard_normal((40, 64)) + 1j * rng.standard_normal((40, 64)), DESK)).samples
    mag = np.abs(dsp.stft(x, DESK).data)
    hist = []
    dsp.griffin_lim(mag, None, 30, DESK, rng=rng, history=hist)
    assert len(hist) == 31
    assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]


def test_griffin_lim_errors():
    with pytest.raises(DataError, match="invalid magnitude"):
        dsp.griffin_lim(-np.ones((3, 64)), None, 1, DESK)


def test_audio_clip_validation():
    with pytest.raises(DataError):
        AudioClip(np.array([0.0, np.nan]))
    with pytest.raises(DataError):
        AudioClip(np.zeros(3), 0)
    assert AudioClip(np.zeros(8000)).duration == 0.5


def test_stft_config_validation():
    with pytest.raises(UsageError):
        StftConfig(fft_size=256, win_length=400)
    with pytest.raises(UsageError):
        StftConfig(hop_length=500)
    with pytest.raises(UsageError):
        StftConfig(kept_bins=300)


def test_wav_round_trip(tmp_path, rng):
    clip = AudioClip(rng.uniform(-1, 1, 1000))
    dsp.write_wav(tmp_path / "a.wav", clip)
    back = dsp.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - clip.samples)) <= 1 / 32767


def test_wav_clamps(tmp_path):
    dsp.write_wav(tmp_path / "c.wav", AudioClip(np.array([2.0, -3.0, 0.5])))
    back = dsp.read_wav(tmp_path / "c.wav").samples
    np.testing.assert_allclose(back, [1.0, -1.0, 0.5], atol=1 / 32767)


def test_wav_errors(tmp_path):
    empty = tmp_path / "empty.wav"
    empty.write_bytes(b"")
    with pytest.raises(DataError, match="not a WAV file"):
        dsp.read_wav(empty)
    junk = tmp_path / "junk.wav"
    junk.write_bytes(b"hello world, definitely not riff")
    with pytest.raises(DataError, match="not a WAV file"):
        dsp.read_wav(junk)


def test_wav_unsupported_encoding(tmp_path):
    from scipy.io import wavfile

    wavfile.write(tmp_path / "u8.wav", 16000, np.array([0, 128, 255], dtype=np.uint8))
    with pytest.raises(DataError, match="unsupported encoding"):
        dsp.read_wav(tmp_path / "u8.wav")


def test_wav_stereo_takes_first_channel(tmp_path, rng):
    from scipy.io import wavfile

    data = (rng.uniform(-1, 1, (500, 2)) * 32767).astype(np.int16)
    wavfile.write(tmp_path / "st.wav", 16000, data)
    back = dsp.read_wav(tmp_path / "st.wav")
    np.testing.assert_array_equal(back.samples, data[:, 0] / 32767.0)


def test_wav_float_passthrough(tmp_path, rng):
    x = rng.uniform(-1, 1, 300).astype(np.float32)
    dsp.write_wav_float(tmp_path / "f.wav", x, 8000)
    back = dsp.read_wav(tmp_path / "f.wav")
    assert back.sample_rate == 8000
    np.testing.assert_array_equal(back.samples, x.astype(np.float64))
