"""Shoebox image-source room simulation, Schroeder RT60, convolution and noise mixing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .dsp import SAMPLE_RATE, AudioClip
from .errors import DataError

POSE_MARGIN = 0.1
KERNEL_TAPS = 81
AMPLITUDE_FLOOR = 1e-3  # -60 dB relative to the direct path


@dataclass(frozen=True)
class ShoeboxRoom:
    dims: tuple[float, float, float]
    # walls ordered -x, +x, -y, +y, -z, +z
    absorption: tuple[float, float, float, float, float, float] = (0.3,) * 6
    speed_of_sound: float = 343.0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        object.__setattr__(self, "absorption", tuple(float(a) for a in self.absorption))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise DataError(f"room dims must be three positive lengths, got {self.dims}")
        if len(self.absorption) != 6 or not all(0.0 <= a <= 1.0 for a in self.absorption):
            raise DataError(f"absorption must be six values in [0, 1], got {self.absorption}")

    @property
    def volume(self) -> float:
        lx, ly, lz = self.dims
        return lx * ly * lz

    def wall_areas(self) -> np.ndarray:
        lx, ly, lz = self.dims
        return np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])

    def sabine_rt60(self) -> float:
        absorbing = float(np.dot(self.wall_areas(), self.absorption))
        if absorbing <= 0:
            return float("inf")
        return 0.161 * self.volume / absorbing


@dataclass(frozen=True)
class Pose:
    position: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(p) for p in self.position))

    @property
    def xyz(self) -> np.ndarray:
        return np.array(self.position)


@dataclass
class ImpulseResponse:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise DataError("impulse response contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]


def check_pose(room: ShoeboxRoom, pose: Pose, margin: float = POSE_MARGIN) -> None:
    p = pose.xyz
    dims = np.array(room.dims)
    if np.any(p < margin) or np.any(p > dims - margin):
        raise DataError(f"pose out of bounds: {pose.position} in room {room.dims}")


def image_sources(room: ShoeboxRoom, src: Pose, max_order: int):
    """Enumerate mirror images of ``src`` up to ``max_order`` reflections.

    Returns ``(positions [M, 3], reflection gain [M], order [M])``. The gain is
    the product of sqrt(1 - alpha) over every wall bounce of the path.
    """
    if max_order < 0:
        raise DataError("max_order must be >= 0")
    r = np.arange(-max_order, max_order + 1)
    qx, qy, qz = np.meshgrid(r, r, r, indexing="ij")
    q = np.stack([qx.ravel(), qy.ravel(), qz.ravel()], axis=1)
    order = np.abs(q).sum(axis=1)
    q = q[order <= max_order]
    order = order[order <= max_order]

    dims = np.array(room.dims)
    s = src.xyz
    odd = q % 2 != 0
    pos = np.where(odd, (q + 1) * dims - s, q * dims + s)

    beta = np.sqrt(1.0 - np.array(room.absorption)).reshape(3, 2)  # [axis, (low, high)]
    # bounces on the high wall = ceil(q/2) for q > 0; low wall = ceil(|q|/2) for q < 0
    high_hits = np.where(q > 0, (q + 1) // 2, (-q) // 2)
    low_hits = np.where(q > 0, q // 2, (-q + 1) // 2)
    gain = np.prod(beta[:, 0] ** low_hits * beta[:, 1] ** high_hits, axis=1)
    return pos, gain, order


def fractional_delay_kernel(delays: np.ndarray, taps: int = KERNEL_TAPS):
    """Hann-windowed sinc taps for each (fractional) sample delay.

    Returns integer start indices [M] and kernel values [M, taps].
    """
    half = taps // 2
    centre = np.round(delays).astype(np.int64)
    offsets = np.arange(-half, half + 1)
    t = (centre[:, None] + offsets[None, :]) - delays[:, None]
    window = 0.5 * (1.0 + np.cos(2.0 * np.pi * t / taps))
    return centre - half, np.sinc(t) * window


def simulate_rir(
    room: ShoeboxRoom,
    src: Pose,
    mic: Pose,
    max_order: int = 30,
    sample_rate: int = SAMPLE_RATE,
) -> ImpulseResponse:
    check_pose(room, src)
    check_pose(room, mic)
    pos, gain, _ = image_sources(room, src, max_order)
    dist = np.linalg.norm(pos - mic.xyz, axis=1)
    amp = gain / (4.0 * np.pi * dist)
    direct = 1.0 / (4.0 * np.pi * np.linalg.norm(src.xyz - mic.xyz))
    keep = amp >= AMPLITUDE_FLOOR * direct
    dist, amp = dist[keep], amp[keep]

    delays = dist / room.speed_of_sound * sample_rate
    starts, kernels = fractional_delay_kernel(delays)
    length = int(starts.max()) + KERNEL_TAPS
    idx = starts[:, None] + np.arange(KERNEL_TAPS)[None, :]
    vals = kernels * amp[:, None]
    valid = idx >= 0
    out = np.bincount(idx[valid], weights=vals[valid], minlength=length)
    return ImpulseResponse(out[:length], sample_rate)


def energy_decay_curve(rir: ImpulseResponse) -> np.ndarray:
    """Schroeder backward integral in dB, normalised to 0 dB at t = 0."""
    energy = np.asarray(rir.samples, dtype=np.float64) ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    total = edc[0]
    if total <= 0:
        raise DataError("decay range too small")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(edc / total)


def rt60_schroeder(rir: ImpulseResponse, fit_db: tuple[float, float] = (-5.0, -25.0)) -> float:
    """RT60 from a line fit to the -5..-25 dB span of the decay curve (T20 x 3)."""
    edc = energy_decay_curve(rir)
    hi, lo = fit_db
    sel = np.flatnonzero((edc <= hi) & (edc >= lo))
    if sel.size < 3 or np.min(edc) > lo - 5.0:
        raise DataError("decay range too small")
    t = sel / rir.sample_rate
    slope, _ = np.polyfit(t, edc[sel], 1)
    if slope >= 0:
        raise DataError("decay range too small")
    return float(-60.0 / slope)


def convolve_rir(clean: AudioClip, rir: ImpulseResponse) -> AudioClip:
    if clean.sample_rate != rir.sample_rate:
        raise DataError("rate mismatch")
    return AudioClip(fftconvolve(clean.samples, rir.samples, mode="full"), clean.sample_rate)


def mix_at_snr(
    signal: AudioClip,
    noise: AudioClip,
    snr_db: float,
    rng: np.random.Generator | None = None,
) -> AudioClip:
    """Add ``noise`` scaled so the signal-to-noise power ratio equals ``snr_db``.

    ``snr_db = inf`` returns the signal unchanged.
    """
    if np.isposinf(snr_db):
        return AudioClip(signal.samples.copy(), signal.sample_rate)
    n = len(signal)
    if len(noise) < n:
        raise DataError("noise shorter than signal")
    rng = rng if rng is not None else np.random.default_rng(0)
    offset = int(rng.integers(0, len(noise) - n + 1))
    chunk = noise.samples[offset : offset + n]
    p_sig = np.mean(signal.samples**2)
    p_noise = np.mean(chunk**2)
    if p_noise <= 0:
        raise DataError("noise has zero power")
    if p_sig <= 0:
        raise DataError("signal has zero power")
    g = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioClip(signal.samples + g * chunk, signal.sample_rate)
