import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import spearmanr

from visdereverb.dsp import AudioClip
from visdereverb.errors import DataError
from visdereverb.room import (
    ImpulseResponse,
    Pose,
    ShoeboxRoom,
    convolve_rir,
    image_sources,
    mix_at_snr,
    rt60_schroeder,
    simulate_rir,
)

FS = 16000
ROOM = ShoeboxRoom((4.0, 3.0, 2.5))
SRC, MIC = Pose((1.0, 1.0, 1.5)), Pose((3.0, 2.0, 1.5))


def brute_force_images(dims, src, absorption, max_order):
    """Reflect the source across walls one bounce at a time; no closed forms."""
    beta = np.sqrt(1 - np.asarray(absorption))
    found = {}
    frontier = [(np.asarray(src, float), 1.0, None)]
    found[tuple(np.round(src, 9))] = 1.0
    for _ in range(max_order):
        nxt = []
        for pos, gain, last in frontier:
            for wall in range(6):
                if wall == last:
                    continue
                axis, side = divmod(wall, 2)
                plane = 0.0 if side == 0 else dims[axis]
                p = pos.copy()
                p[axis] = 2 * plane - p[axis]
                key = tuple(np.round(p, 9))
                if key not in found:
                    found[key] = gain * beta[wall]
                    nxt.append((p, gain * beta[wall], wall))
        frontier = nxt
    return found


def random_room(rng):
    dims = rng.uniform([3, 3, 2.4], [8, 7, 3.5])
    src = rng.uniform(0.2, dims - 0.2)
    mic = rng.uniform(0.2, dims - 0.2)
    return dims, src, mic


def test_anechoic_single_arrival():
    room = ShoeboxRoom(ROOM.dims, (1.0,) * 6)
    rir = simulate_rir(room, SRC, MIC, max_order=10)
    assert int(np.argmax(np.abs(rir.samples))) == 104
    d = np.sqrt(5.0)
    assert abs(np.argmax(rir.samples) - round(FS * d / 343)) <= 1
    # the fractional-delay kernel has unit DC gain, so the taps sum to the path amplitude
    assert rir.samples.sum() == pytest.approx(1 / (4 * np.pi * d), rel=0.01)


def test_order_zero_ignores_absorption():
    a = simulate_rir(ShoeboxRoom(ROOM.dims, (0.1,) * 6), SRC, MIC, max_order=0)
    b = simulate_rir(ShoeboxRoom(ROOM.dims, (1.0,) * 6), SRC, MIC, max_order=5)
    np.testing.assert_array_equal(a.samples, b.samples)


@pytest.mark.parametrize("seed", range(5))
def test_images_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    dims, src, _ = random_room(rng)
    alpha = rng.uniform(0, 0.9, 6)
    room = ShoeboxRoom(tuple(dims), tuple(alpha))
    pos, gain, order = image_sources(room, Pose(tuple(src)), 2)
    oracle = brute_force_images(dims, src, alpha, 2)
    assert len(pos) == len(oracle) == 25
    for p, g in zip(pos, gain):
        assert g == pytest.approx(oracle[tuple(np.round(p, 9))], rel=1e-12)
    assert np.sum(order == 1) == 6


def test_first_order_arrival_times():
    pos, _, order = image_sources(ROOM, SRC, 1)
    dims = np.array(ROOM.dims)
    s = SRC.xyz
    mirrors = []
    for axis in range(3):
        for plane in (0.0, dims[axis]):
            p = s.copy()
            p[axis] = 2 * plane - p[axis]
            mirrors.append(p)
    got = sorted(np.linalg.norm(pos[order == 1] - MIC.xyz, axis=1))
    want = sorted(np.linalg.norm(np.array(mirrors) - MIC.xyz, axis=1))
    np.testing.assert_allclose(got, want, rtol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_direct_peak_location(seed):
    rng = np.random.default_rng(seed)
    dims, src, mic = random_room(rng)
    room = ShoeboxRoom(tuple(dims), (1.0,) * 6)
    rir = simulate_rir(room, Pose(tuple(src)), Pose(tuple(mic)), 3)
    d = np.linalg.norm(src - mic)
    assert abs(int(np.argmax(rir.samples)) - round(FS * d / 343)) <= 1


def test_deterministic():
    a = simulate_rir(ROOM, SRC, MIC, 8)
    b = simulate_rir(ROOM, SRC, MIC, 8)
    assert a.samples.tobytes() == b.samples.tobytes()


def test_energy_decreases_with_absorption():
    energies = []
    for a in (0.1, 0.2, 0.4, 0.6, 0.8):
        alpha = [0.3] * 6
        alpha[3] = a
        rir = simulate_rir(ShoeboxRoom(ROOM.dims, tuple(alpha)), SRC, MIC, 12)
        energies.append(np.sum(rir.samples**2))
    assert all(b < a for a, b in zip(energies, energies[1:]))


def test_pose_out_of_bounds():
    with pytest.raises(DataError, match="pose out of bounds"):
        simulate_rir(ROOM, Pose((0.05, 1.0, 1.0)), MIC, 2)
    with pytest.raises(DataError, match="pose out of bounds"):
        simulate_rir(ROOM, SRC, Pose((3.0, 2.95, 1.0)), 2)


def test_room_validation():
    with pytest.raises(DataError):
        ShoeboxRoom((0.0, 3.0, 3.0))
    with pytest.raises(DataError):
        ShoeboxRoom((3.0, 3.0, 3.0), (1.2,) * 6)


def exp_decay(tau, seed=0, fs=FS):
    rng = np.random.default_rng(seed)
    t = np.arange(int(12 * tau * fs)) / fs
    return ImpulseResponse(np.exp(-t / tau) * rng.standard_normal(t.size), fs)


@pytest.mark.parametrize("tau", [0.02, 0.05, 0.1, 0.2])
def test_rt60_exponential(tau):
    assert rt60_schroeder(exp_decay(tau)) == pytest.approx(np.log(1000) * tau, rel=0.05)


def test_rt60_degenerate():
    with pytest.raises(DataError, match="decay range too small"):
        rt60_schroeder(ImpulseResponse(np.r_[1.0, np.zeros(100)], FS))


@given(st.floats(1e-3, 1e3))
def test_rt60_scale_invariant(k):
    rir = exp_decay(0.05)
    scaled = ImpulseResponse(rir.samples * k, FS)
    assert rt60_schroeder(scaled) == pytest.approx(rt60_schroeder(rir), rel=1e-9)


def test_rt60_tracks_sabine():
    rng = np.random.default_rng(5)
    measured, sabine = [], []
    for _ in range(50):
        dims, src, mic = random_room(rng)
        room = ShoeboxRoom(tuple(dims), (rng.uniform(0.15, 0.7),) * 6)
        measured.append(rt60_schroeder(simulate_rir(room, Pose(tuple(src)), Pose(tuple(mic)), 30)))
        sabine.append(room.sabine_rt60())
    assert spearmanr(measured, sabine).statistic > 0.9


def test_convolve_identity_and_shift(rng):
    clip = AudioClip(rng.standard_normal(50))
    out = convolve_rir(clip, ImpulseResponse(np.r_[1.0], FS))
    np.testing.assert_allclose(out.samples, clip.samples, atol=1e-12)
    shifted = convolve_rir(clip, ImpulseResponse(np.r_[0, 0, 0, 1.0], FS))
    assert len(shifted) == 53
    np.testing.assert_allclose(shifted.samples[3:], clip.samples, atol=1e-12)
    np.testing.assert_allclose(shifted.samples[:3], 0, atol=1e-12)


def test_convolve_matches_direct(rng):
    x, h = rng.standard_normal(64), rng.standard_normal(16)
    direct = np.zeros(79)
    for i in range(64):
        for j in range(16):
            direct[i + j] += x[i] * h[j]
    out = convolve_rir(AudioClip(x), ImpulseResponse(h, FS)).samples
    np.testing.assert_allclose(out, direct, atol=1e-10)


@given(st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_convolve_linear(seed, a):
    r = np.random.default_rng(seed)
    x, y, h = r.standard_normal(40), r.standard_normal(40), r.standard_normal(9)
    rir = ImpulseResponse(h, FS)
    lhs = convolve_rir(AudioClip(a * x + y), rir).samples
    rhs = a * convolve_rir(AudioClip(x), rir).samples + convolve_rir(AudioClip(y), rir).samples
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_convolve_rate_mismatch():
    with pytest.raises(DataError, match="rate mismatch"):
        convolve_rir(AudioClip(np.ones(4), 8000), ImpulseResponse(np.ones(2), FS))


@given(st.integers(0, 2**31 - 1), st.floats(-20, 40))
def test_mix_hits_requested_snr(seed, snr):
    r = np.random.default_rng(seed)
    sig = AudioClip(r.standard_normal(300))
    noise = AudioClip(r.standard_normal(500))
    out = mix_at_snr(sig, noise, snr, np.random.default_rng(seed))
    added = out.samples - sig.samples
    measured = 10 * np.log10(np.mean(sig.samples**2) / np.mean(added**2))
    assert abs(measured - snr) < 1e-9


def test_mix_special_cases(rng):
    sig = AudioClip(rng.standard_normal(100))
    noise = AudioClip(rng.standard_normal(100))
    assert np.array_equal(mix_at_snr(sig, noise, np.inf).samples, sig.samples)
    out = mix_at_snr(sig, noise, 0.0)
    p_noise = np.mean((out.samples - sig.samples) ** 2)
    assert p_noise == pytest.approx(np.mean(sig.samples**2), rel=1e-9)
    with pytest.raises(DataError, match="noise has zero power"):
        mix_at_snr(sig, AudioClip(np.zeros(100)), 10)
    with pytest.raises(DataError, match="signal has zero power"):
        mix_at_snr(AudioClip(np.zeros(100)), noise, 10)


def test_mix_seeded_offset(rng):
    sig = AudioClip(rng.standard_normal(100))
    noise = AudioClip(rng.standard_normal(1000))
    a = mix_at_snr(sig, noise, 5, np.random.default_rng(3))
    b = mix_at_snr(sig, noise, 5, np.random.default_rng(3))
    assert np.array_equal(a.samples, b.samples)
