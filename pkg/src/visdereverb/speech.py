"""Synthetic speech-like signals for corpus-free dataset builds.

Voiced syllables are a harmonic source following a smooth random pitch
contour, shaped by three formant resonators and an attack/decay envelope.
Syllables are separated by short pauses so reverberant tails are exposed.
A faint white recording floor fills the pauses, as in real corpora; exact
digital silence would let the log-spectral metrics be dominated by pauses.
"""
from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .dsp import SAMPLE_RATE, AudioClip

# (F1, F2, F3) centre frequencies in Hz for a handful of vowel-like shapes
VOWELS = np.array(
    [
        [730, 1090, 2440],
        [270, 2290, 3010],
        [530, 1840, 2480],
        [570, 840, 2410],
        [300, 870, 2240],
        [660, 1720, 2410],
        [490, 1350, 1690],
    ],
    dtype=np.float64,
)
BANDWIDTHS = np.array([90.0, 110.0, 170.0])


def _resonator(freq: float, bandwidth: float, fs: int):
    r = np.exp(-np.pi * bandwidth / fs)
    theta = 2 * np.pi * freq / fs
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return b, a


def synth_syllable(n: int, f0: np.ndarray, formants: np.ndarray, fs: int) -> np.ndarray:
    phase = 2 * np.pi * np.cumsum(f0) / fs
    n_harm = int(0.45 * fs / f0.max())
    k = np.arange(1, n_harm + 1)[:, None]
    source = np.sum(np.sin(k * phase[None, :]) / k, axis=0)
    y = source
    for freq, bw in zip(formants, BANDWIDTHS):
        b, a = _resonator(freq, bw, fs)
        y = lfilter(b, a, y)
    attack = max(1, n // 8)
    env = np.ones(n)
    env[:attack] = np.linspace(0.0, 1.0, attack)
    env[-2 * attack :] = np.linspace(1.0, 0.0, 2 * attack) ** 2
    return y * env


def synthetic_speech(
    duration: float,
    rng: np.random.Generator,
    sample_rate: int = SAMPLE_RATE,
    peak: float = 0.5,
    noise_floor_db: float | None = -50.0,
) -> AudioClip:
    """Speech-like clip of ``duration`` seconds drawn entirely from ``rng``.

    ``noise_floor_db`` is the standard deviation of the recording floor
    relative to ``peak``; ``None`` leaves the pauses digitally silent.
    """
    n_total = int(round(duration * sample_rate))
    out = np.zeros(n_total)
    base_f0 = rng.uniform(90.0, 220.0)
    pos = int(rng.uniform(0.0, 0.05) * sample_rate)
    while pos < n_total:
        n = int(rng.uniform(0.08, 0.25) * sample_rate)
        n = min(n, n_total - pos)
        if n < 64:
            break
        t = np.arange(n) / sample_rate
        drift = rng.uniform(-0.25, 0.25)
        wobble = 0.05 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
        f0 = base_f0 * (1.0 + drift * t / max(t[-1], 1e-3) * 0.5 + wobble)
        formants = VOWELS[rng.integers(len(VOWELS))] * rng.uniform(0.9, 1.1, size=3)
        seg = synth_syllable(n, f0, formants, sample_rate)
        if rng.random() < 0.3:
            # unvoiced onset
            burst = min(n, int(0.03 * sample_rate))
            noise = rng.standard_normal(burst) * np.linspace(1.0, 0.0, burst)
            b, a = _resonator(rng.uniform(2500, 5000), 1200.0, sample_rate)
            seg[:burst] += 0.5 * np.std(seg) * lfilter(b, a, noise) / (np.std(lfilter(b, a, noise)) + 1e-12)
        out[pos : pos + n] += seg * rng.uniform(0.5, 1.0)
        pos += n + int(rng.uniform(0.03, 0.2) * sample_rate)
    m = np.max(np.abs(out))
    if m > 0:
        out *= peak / m
    if noise_floor_db is not None:
        out += peak * 10 ** (noise_floor_db / 20) * rng.standard_normal(n_total)
    return AudioClip(out, sample_rate)
