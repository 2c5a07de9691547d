import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import fftconvolve

from visdereverb import dsp
from visdereverb.dataset import (
    RoomFamily,
    SceneSamplerConfig,
    Segment,
    build_sample,
    build_split,
    load_sample,
    load_split,
    read_manifest,
    sample_rng,
    segment_count,
    segment_spectrogram,
    spectrogram_pair,
    stitch_segments,
    verify_manifest,
)
from visdereverb.dsp import AudioClip, LogMagPhase, StftConfig
from visdereverb.errors import DataError, UsageError
from visdereverb.room import Pose, ShoeboxRoom, simulate_rir
from visdereverb.speech import synthetic_speech

DESK = StftConfig.desk()
MIN = DESK.num_samples(64)
SAMPLER = SceneSamplerConfig(rng_seed=3, clip_seconds=0.2)


def lmp(T, F=8, seed=0):
    r = np.random.default_rng(seed)
    return LogMagPhase(r.standard_normal((T, F)), r.uniform(-np.pi, np.pi, (T, F)))


def test_build_is_deterministic(tmp_path):
    a = build_split(tmp_path / "a", "train", 2, SAMPLER, min_samples=MIN)
    b = build_split(tmp_path / "b", "train", 2, SAMPLER, min_samples=MIN)
    assert a.read_bytes() == b.read_bytes()
    for name in ("clean.wav", "reverb.wav", "pano.bin", "meta.json"):
        assert (a.parent / "sample_00001" / name).read_bytes() == (b.parent / "sample_00001" / name).read_bytes()


def test_splits_use_distinct_streams(tmp_path):
    keys = {tuple(sample_rng(3, split, 0)[1]) for split in ("train", "val", "test")}
    assert len(keys) == 3
    build_split(tmp_path, "train", 1, SAMPLER, min_samples=MIN)
    build_split(tmp_path, "test", 1, SAMPLER, min_samples=MIN)
    tr = load_sample(tmp_path / "train" / "sample_00000").meta
    te = load_sample(tmp_path / "test" / "sample_00000").meta
    assert tr.room_dims != te.room_dims


def test_manifest_lists_hashes(tmp_path):
    build_split(tmp_path, "val", 2, SAMPLER, min_samples=MIN, config_digest="abc")
    header, records = read_manifest(tmp_path / "val")
    assert header["config_digest"] == "abc" and header["seed"] == 3 and header["count"] == 2
    assert [r["id"] for r in records] == ["sample_00000", "sample_00001"]
    assert all(len(h) == 64 for r in records for h in r["files"].values())
    verify_manifest(tmp_path / "val")
    wav = tmp_path / "val" / "sample_00001" / "reverb.wav"
    wav.write_bytes(wav.read_bytes()[:-2] + b"\x00\x01")
    with pytest.raises(DataError, match="hash mismatch"):
        verify_manifest(tmp_path / "val")


def test_meta_consistency(tmp_path):
    build_split(tmp_path, "train", 3, SAMPLER, min_samples=MIN, config_digest="d")
    for s in load_split(tmp_path / "train"):
        m = s.meta
        assert m.distance == pytest.approx(np.linalg.norm(np.subtract(m.src, m.mic)), abs=1e-9)
        assert SAMPLER.distance_min <= m.distance <= SAMPLER.distance_max
        assert m.config_digest == "d" and m.rng_seed[0] == 3
        assert np.max(np.abs(s.reverb.samples)) == pytest.approx(0.95, abs=1 / 32767)
        assert m.direct_gain == pytest.approx(1 / (4 * np.pi * m.distance))
        assert m.rt60 is None or m.rt60 > 0


def test_anechoic_sample_is_delayed_target(tmp_path):
    fam = RoomFamily(absorption_min=1.0, absorption_max=1.0)
    sampler = SceneSamplerConfig(families=(fam,), rng_seed=1)
    clean = synthetic_speech(0.3, np.random.default_rng(0))
    d = build_sample(clean, sampler, np.random.default_rng(5), tmp_path, min_samples=MIN)
    s = load_sample(d)
    m = s.meta
    rir = simulate_rir(ShoeboxRoom(tuple(m.room_dims), (1.0,) * 6), Pose(tuple(m.src)), Pose(tuple(m.mic)), 0)
    # the direct path is the only arrival; dividing out its amplitude leaves a pure delay
    expected = fftconvolve(s.clean.samples, rir.samples / m.direct_gain)
    assert np.max(np.abs(s.reverb.samples - expected[: len(s.reverb)])) < 5e-4
    lag = int(np.argmax(np.correlate(s.reverb.samples, s.clean.samples, "full"))) - (len(s.clean) - 1)
    assert abs(lag - round(16000 * m.distance / 343)) <= 1


def test_clip_too_short(tmp_path):
    with pytest.raises(DataError, match="clip too short"):
        build_sample(AudioClip(np.ones(100)), SAMPLER, np.random.default_rng(0), tmp_path, min_samples=MIN)


def test_sampler_exhausted(tmp_path):
    sampler = SceneSamplerConfig(families=(RoomFamily((3, 3, 2.5), (3, 3, 2.5)),), distance_min=5.0, distance_max=6.0)
    with pytest.raises(DataError, match="sampler exhausted"):
        build_sample(synthetic_speech(0.3, np.random.default_rng(0)), sampler, np.random.default_rng(0), tmp_path, min_samples=MIN)


def test_sampler_validation():
    with pytest.raises(UsageError):
        SceneSamplerConfig(distance_min=0.1)
    with pytest.raises(UsageError):
        SceneSamplerConfig(families=(RoomFamily(absorption_min=0.5, absorption_max=0.2),))
    with pytest.raises(UsageError):
        SceneSamplerConfig(families=())


def test_noise_mixing(tmp_path):
    sampler = SceneSamplerConfig(rng_seed=2, snr_db=10.0)
    clean = synthetic_speech(0.3, np.random.default_rng(0))
    noisy = load_sample(build_sample(clean, sampler, np.random.default_rng(1), tmp_path / "n", min_samples=MIN))
    quiet = load_sample(build_sample(clean, SceneSamplerConfig(rng_seed=2), np.random.default_rng(1), tmp_path / "q", min_samples=MIN))
    resid = noisy.reverb.samples - quiet.reverb.samples
    snr = 10 * np.log10(np.mean(quiet.reverb.samples**2) / np.mean(resid**2))
    assert snr == pytest.approx(10.0, abs=0.1)


def test_segment_examples():
    segs = segment_spectrogram(lmp(640), 256)
    assert [s.start for s in segs] == [0, 128, 256, 384] and not any(s.padded for s in segs)
    one = segment_spectrogram(lmp(256), 256)
    assert len(one) == 1 and not one[0].padded
    two = segment_spectrogram(lmp(300), 256)
    assert len(two) == 2 and two[1].padded and not two[0].padded
    pad = two[1].data[:, 300 - 128 :]
    assert pad.shape[1] == 84
    assert np.all(pad[0] == np.log(dsp.MAG_EPS)) and np.all(pad[1] == 0)


def test_segment_errors():
    with pytest.raises(DataError, match="empty spectrogram"):
        segment_spectrogram(lmp(0), 8)
    with pytest.raises(DataError):
        segment_spectrogram(lmp(20), 7)


@given(st.integers(1, 900), st.sampled_from([4, 8, 16, 64]))
def test_segment_count_formula(T, window):
    segs = segment_spectrogram(lmp(T, 3), window)
    assert len(segs) == segment_count(T, window, window // 2) == -(-max(T - window, 0) // (window // 2)) + 1
    assert all(s.data.shape == (2, window, 3) for s in segs)


@given(st.integers(64, 2000))
def test_stitch_inverts_segment(T):
    x = lmp(T, 5, seed=T)
    back = stitch_segments(segment_spectrogram(x, 64), T)
    assert back.mag.tobytes() == x.mag.tobytes() and back.phase.tobytes() == x.phase.tobytes()


@given(st.integers(1, 63))
def test_stitch_single_short_segment(T):
    x = lmp(T, 4)
    back = stitch_segments(segment_spectrogram(x, 64), T)
    assert np.array_equal(back.mag, x.mag)


@given(st.integers(256, 1500))
def test_each_frame_from_one_middle_half(T):
    window, hop, q = 256, 128, 64
    n = segment_count(T, window, hop)
    # segment k writes its index into the magnitude and its local frame into the phase
    segs = [np.stack([np.full((window, 1), k, float), np.arange(window, dtype=float)[:, None]]) for k in range(n)]
    out = stitch_segments(segs, T)
    k = out.mag[:, 0].astype(int)
    local = out.phase[:, 0].astype(int)
    t = np.arange(T)
    assert np.array_equal(k * hop + local, t)
    interior = (k > 0) & (k < n - 1)
    assert np.all((local[interior] >= q) & (local[interior] < 3 * q))


def test_frame_200_owner():
    segs = [np.full((2, 256, 1), k, float) for k in range(4)]
    assert stitch_segments(segs, 640).mag[200, 0] == 1


def test_stitch_mismatch():
    segs = segment_spectrogram(lmp(640), 256)
    with pytest.raises(DataError, match="segment mismatch"):
        stitch_segments(segs, 1000)
    with pytest.raises(DataError, match="segment mismatch"):
        stitch_segments([], 10)
    assert isinstance(segs[0], Segment)


def test_spectrogram_pair_grid(tmp_path):
    build_split(tmp_path, "train", 1, SAMPLER, min_samples=MIN)
    s = load_split(tmp_path / "train")[0]
    rev, clean = spectrogram_pair(s, DESK)
    assert rev.shape == clean.shape == (DESK.num_frames(len(s.reverb)), 64)


def test_synthetic_speech_properties():
    x = synthetic_speech(1.0, np.random.default_rng(0))
    assert len(x) == 16000 and np.max(np.abs(x.samples)) == pytest.approx(0.5, abs=0.02)
    quiet = synthetic_speech(1.0, np.random.default_rng(0), noise_floor_db=None)
    assert np.max(np.abs(quiet.samples)) == pytest.approx(0.5) and np.sum(quiet.samples == 0) > 1000
    assert np.std(x.samples - quiet.samples) == pytest.approx(0.5 * 10 ** (-50 / 20), rel=0.05)
    y = synthetic_speech(1.0, np.random.default_rng(0))
    assert np.array_equal(x.samples, y.samples)
    spec = np.abs(np.fft.rfft(x.samples))
    freqs = np.fft.rfftfreq(len(x), 1 / 16000)
    # voiced speech: most energy below 4 kHz
    assert np.sum(spec[freqs < 4000] ** 2) > 0.8 * np.sum(spec**2)
