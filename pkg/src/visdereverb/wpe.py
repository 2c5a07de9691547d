"""Single-channel weighted prediction error (WPE) dereverberation in the STFT domain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import AudioClip, ComplexSpectrogram, StftConfig, istft, stft
from .errors import DataError, UsageError


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    iterations: int = 3
    eps: float = 1e-8
    delta: float = 1e-6

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 0:
            raise UsageError("WPE needs taps >= 1, delay >= 1, iterations >= 0")


def delayed_stack(x: np.ndarray, taps: int, delay: int) -> np.ndarray:
    """[T, F] -> [F, T, taps] with entry k holding x[t - delay - k] (zero before start)."""
    T, F = x.shape
    out = np.zeros((F, T, taps), dtype=x.dtype)
    for k in range(taps):
        lag = delay + k
        if lag < T:
            out[:, lag:, k] = x[: T - lag].T
    return out


def variance_floor(x: np.ndarray, eps: float) -> np.ndarray:
    """Per-bin floor ``eps`` times the bin's mean input power, shape [F].

    Tying the floor to the input level keeps the whole iteration exactly
    equivariant to a global gain. Silent bins fall back to ``eps`` itself.
    """
    power = np.mean(np.abs(x) ** 2, axis=0)
    return np.where(power > 0, eps * power, eps)


def wpe_objective(s: np.ndarray, eps) -> float:
    """Sum over bins and frames of |s|^2 / lambda + ln(lambda), lambda = max(|s|^2, eps).

    ``eps`` is a scalar or a per-bin floor from ``variance_floor``.
    """
    power = np.abs(s) ** 2
    lam = np.maximum(power, eps)
    return float(np.sum(power / lam + np.log(lam)))


def wpe_array(x: np.ndarray, cfg: WpeConfig = WpeConfig(), history: list | None = None) -> np.ndarray:
    """Dereverberate a complex [T, F] STFT matrix; bins are processed independently."""
    x = np.asarray(x, dtype=np.complex128)
    T = x.shape[0]
    if T <= cfg.taps + cfg.delay:
        raise DataError("utterance too short for K, delta")
    s = x.copy()
    floor = variance_floor(x, cfg.eps)
    if history is not None:
        history.append(wpe_objective(s, floor))
    if cfg.iterations == 0:
        return s
    stacked = delayed_stack(x, cfg.taps, cfg.delay)  # [F, T, K]
    xf = x.T  # [F, T]
    eye = np.eye(cfg.taps)
    for _ in range(cfg.iterations):
        lam = np.maximum(np.abs(s.T) ** 2, floor[:, None])  # [F, T]
        weighted = stacked / lam[..., None]
        R = np.einsum("ftk,ftl->fkl", weighted, stacked.conj())
        p = np.einsum("ftk,ft->fk", weighted, xf.conj())
        R = R + cfg.delta * eye
        g = np.linalg.solve(R, p[..., None])[..., 0]  # [F, K]
        s = (xf - np.einsum("fk,ftk->ft", g.conj(), stacked)).T
        if history is not None:
            history.append(wpe_objective(s, floor))
    return s


def wpe(spec: ComplexSpectrogram, cfg: WpeConfig = WpeConfig(), history: list | None = None) -> ComplexSpectrogram:
    return ComplexSpectrogram(wpe_array(spec.data, cfg, history), spec.config)


def wpe_clip(clip: AudioClip, cfg: WpeConfig = WpeConfig(), stft_cfg: StftConfig = StftConfig()) -> AudioClip:
    """Waveform in, waveform out, same length as the input.

    The input is zero-padded so its last samples fall inside a full frame.
    """
    n = len(clip)
    frames = stft_cfg.num_frames(n)
    if stft_cfg.num_samples(frames) < n:
        frames += 1
    x = np.zeros(stft_cfg.num_samples(frames))
    x[:n] = clip.samples
    out = istft(wpe(stft(AudioClip(x, clip.sample_rate), stft_cfg), cfg), clip.sample_rate).samples
    padded = np.zeros(len(clip))
    padded[: len(out)] = out[: len(clip)]
    return AudioClip(padded, clip.sample_rate)
