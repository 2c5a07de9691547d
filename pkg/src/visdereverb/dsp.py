"""STFT analysis/synthesis, log-magnitude/phase codec, Griffin-Lim and WAV I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

from .errors import DataError, UsageError

SAMPLE_RATE = 16000
MAG_EPS = 1e-5


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    win_length: int = 400
    hop_length: int = 160
    window: str = "hamming"
    kept_bins: int = 256

    def __post_init__(self):
        if not 0 < self.win_length <= self.fft_size:
            raise UsageError("win_length must satisfy 0 < win_length <= fft_size")
        if not 0 < self.hop_length <= self.win_length:
            raise UsageError("hop_length must satisfy 0 < hop_length <= win_length")
        if not 0 < self.kept_bins <= self.fft_size // 2 + 1:
            raise UsageError("kept_bins must be at most fft_size/2 + 1")

    @classmethod
    def desk(cls) -> "StftConfig":
        """Scaled-down analysis used for laptop-sized experiments (64 bins)."""
        return cls(fft_size=128, win_length=100, hop_length=40, kept_bins=64)

    def num_frames(self, num_samples: int) -> int:
        if num_samples < self.win_length:
            raise DataError("input too short")
        return 1 + (num_samples - self.win_length) // self.hop_length

    def num_samples(self, num_frames: int) -> int:
        return (num_frames - 1) * self.hop_length + self.win_length

    def window_array(self) -> np.ndarray:
        return get_window(self.window, self.win_length, fftbins=True)


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # [frames, bins]
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2 or self.data.shape[1] != self.config.kept_bins:
            raise DataError(
                f"spectrogram shape {self.data.shape} does not match kept_bins={self.config.kept_bins}"
            )

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]


@dataclass
class LogMagPhase:
    mag: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.mag.shape != self.phase.shape:
            raise DataError(f"mag/phase shape mismatch {self.mag.shape} vs {self.phase.shape}")

    @property
    def shape(self):
        return self.mag.shape

    def stack(self) -> np.ndarray:
        """Two-channel image [2, T, F] as consumed by the network."""
        return np.stack([self.mag, self.phase])

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "LogMagPhase":
        return cls(np.asarray(arr[0]), np.asarray(arr[1]))


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = cfg.num_frames(x.shape[-1])
    frames = sliding_window_view(x, cfg.win_length, axis=-1)[..., :: cfg.hop_length, :]
    return frames[..., :n_frames, :]


def _full_rfft(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    return np.fft.rfft(_frames(x, cfg) * cfg.window_array(), n=cfg.fft_size, axis=-1)


def stft(clip: AudioClip | np.ndarray, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if x.shape[-1] < cfg.win_length:
        raise DataError("input too short")
    return ComplexSpectrogram(_full_rfft(x, cfg)[:, : cfg.kept_bins], cfg)


def _overlap_add(frames: np.ndarray, cfg: StftConfig, weights: np.ndarray | None = None):
    """Sum ``frames * weights`` at hop offsets; also returns the squared-window sum."""
    win = cfg.window_array()
    weights = win if weights is None else weights
    n_frames = frames.shape[0]
    out = np.zeros(cfg.num_samples(n_frames))
    norm = np.zeros_like(out)
    w2 = win * win
    # loop over the hop phase only; frames inside one phase never overlap
    per_phase = -(-cfg.win_length // cfg.hop_length)
    for phase in range(per_phase):
        idx = np.arange(phase, n_frames, per_phase)
        if idx.size == 0:
            continue
        cols = (idx * cfg.hop_length)[:, None] + np.arange(cfg.win_length)
        out[cols] += frames[idx] * weights
        norm[cols] += w2
    return out, norm


@lru_cache(maxsize=16)
def _dropped_basis(cfg: StftConfig) -> np.ndarray | None:
    """Real time-domain basis [win, m] of the bins that ``stft`` discards.

    For a frame g, ``||B.T @ g||^2`` is the Parseval-weighted energy of the
    dropped bins. None when nothing is dropped, or when the zero padding is
    too short for those bins to be recoverable.
    """
    n = np.arange(cfg.win_length)
    cols = []
    for k in range(cfg.kept_bins, cfg.fft_size // 2 + 1):
        arg = 2 * np.pi * k * n / cfg.fft_size
        if 2 * k == cfg.fft_size:
            cols.append(np.cos(arg))
        else:
            cols += [np.sqrt(2) * np.cos(arg), np.sqrt(2) * np.sin(arg)]
    if not cols:
        return None
    basis = np.stack(cols, axis=1)
    if np.linalg.norm(basis, 2) ** 2 >= cfg.fft_size * (1 - 1e-9):
        return None
    return basis


def _restore_dropped(x0: np.ndarray, norm: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Correct plain overlap-add so the dropped bins are free, not forced to zero.

    Plain overlap-add solves ``N D x = r`` with D the squared-window sum.
    Leaving the dropped bins unconstrained subtracts a low-rank term U U^T
    built from the windowed basis at every frame; Woodbury turns that into a
    sparse (frames * m) system.
    """
    basis = _dropped_basis(cfg)
    if basis is None:
        return x0
    from scipy.sparse import coo_matrix
    from scipy.sparse.linalg import spsolve

    n_fft, hop, win_len = cfg.fft_size, cfg.hop_length, cfg.win_length
    n_frames = (len(x0) - win_len) // hop + 1
    m = basis.shape[1]
    wb = cfg.window_array()[:, None] * basis  # [win, m]
    dinv = np.where(norm >= 1e-8, 1.0 / np.where(norm >= 1e-8, norm, 1.0), 0.0)
    dinv_frames = sliding_window_view(dinv, win_len)[::hop][:n_frames]
    rows, cols, vals = [], [], []
    idx = np.arange(n_frames * m).reshape(n_frames, m)
    for delta in range(-(-win_len // hop)):
        if delta >= n_frames:
            break
        lo = delta * hop
        block = np.einsum("tn,nj,nk->tjk", dinv_frames[: n_frames - delta, lo:], wb[lo:], wb[: win_len - lo]) / n_fft
        r = np.broadcast_to(idx[: n_frames - delta, :, None], block.shape)
        c = np.broadcast_to(idx[delta:, None, :], block.shape)
        rows += [r.ravel()] if delta == 0 else [r.ravel(), c.ravel()]
        cols += [c.ravel()] if delta == 0 else [c.ravel(), r.ravel()]
        vals += [block.ravel()] if delta == 0 else [block.ravel(), block.ravel()]
    size = n_frames * m
    gram = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size))
    system = (coo_matrix((np.ones(size), (np.arange(size), np.arange(size))), shape=(size, size)) - gram).tocsc()
    rhs = np.einsum("tn,nj->tj", sliding_window_view(x0, win_len)[::hop][:n_frames], wb).ravel()
    z = np.atleast_1d(spsolve(system, rhs)).reshape(n_frames, m)
    spread, _ = _overlap_add(z @ wb.T, cfg, np.ones(win_len))
    return x0 + dinv * spread / n_fft


def istft(spec: ComplexSpectrogram, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """Least-squares inverse of ``stft`` given only the kept bins.

    With no dropped bins this is windowed overlap-add over the squared-window
    sum. Dropped bins are left free rather than set to zero, which the zero
    padding of each frame makes well posed; a consistent spectrogram then
    inverts exactly.
    """
    cfg = spec.config
    if spec.data.shape[0] == 0:
        raise DataError("empty input")
    full = np.zeros((spec.data.shape[0], cfg.fft_size // 2 + 1), dtype=np.complex128)
    full[:, : cfg.kept_bins] = spec.data
    frames = np.fft.irfft(full, n=cfg.fft_size, axis=-1)[:, : cfg.win_length]
    out, norm = _overlap_add(frames, cfg)
    ok = norm >= 1e-8
    out[ok] /= norm[ok]
    out[~ok] = 0.0
    return AudioClip(_restore_dropped(out, norm, cfg), sample_rate)


def encode(spec: ComplexSpectrogram) -> LogMagPhase:
    """Complex spectrogram to (natural-log magnitude, phase)."""
    return LogMagPhase(np.log(np.abs(spec.data) + MAG_EPS), np.angle(spec.data))


def decode(lmp: LogMagPhase, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    amp = np.maximum(np.exp(lmp.mag) - MAG_EPS, 0.0)
    return ComplexSpectrogram(amp * np.exp(1j * lmp.phase), cfg)


def consistency_residual(x: np.ndarray, mag: np.ndarray, cfg: StftConfig) -> float:
    """Parseval-weighted distance between |STFT(x)| and a target magnitude.

    Interior bins of the half spectrum count twice. When ``istft`` can leave
    the dropped bins free only the kept bins are compared; otherwise the
    dropped bins are compared against zero. Either way this is the distance
    Griffin-Lim provably does not increase.
    """
    full = np.abs(_full_rfft(np.asarray(x, dtype=np.float64), cfg))
    target = np.zeros_like(full)
    target[:, : cfg.kept_bins] = mag
    weights = np.full(full.shape[1], 2.0)
    weights[0] = 1.0
    if cfg.fft_size % 2 == 0:
        weights[-1] = 1.0
    if _dropped_basis(cfg) is not None:
        weights[cfg.kept_bins :] = 0.0
    return float(np.sqrt(np.sum(weights * (full - target) ** 2)))


def griffin_lim(
    mag: np.ndarray,
    init_phase: np.ndarray | None = None,
    iters: int = 30,
    cfg: StftConfig = StftConfig(),
    rng: np.random.Generator | None = None,
    sample_rate: int = SAMPLE_RATE,
    history: list | None = None,
) -> AudioClip:
    """Refine a phase estimate for a linear-amplitude magnitude.

    ``init_phase=None`` starts from uniformly random phase drawn from ``rng``.
    When ``history`` is given, the consistency residual after each iteration
    (and of the starting point) is appended to it.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if np.any(mag < 0) or not np.all(np.isfinite(mag)):
        raise DataError("invalid magnitude")
    if iters < 0:
        raise DataError("iters must be non-negative")
    if init_phase is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        init_phase = rng.uniform(-np.pi, np.pi, size=mag.shape)
    x = istft(ComplexSpectrogram(mag * np.exp(1j * init_phase), cfg), sample_rate).samples
    if history is not None:
        history.append(consistency_residual(x, mag, cfg))
    for _ in range(iters):
        phase = np.angle(stft(x, cfg).data)
        x = istft(ComplexSpectrogram(mag * np.exp(1j * phase), cfg), sample_rate).samples
        if history is not None:
            history.append(consistency_residual(x, mag, cfg))
    return AudioClip(x, sample_rate)


def read_wav(path: str | Path) -> AudioClip:
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError) as exc:
        msg = str(exc).lower()
        if "unknown wave file format" in msg or "bit depth" in msg:
            raise DataError("unsupported encoding") from exc
        raise DataError("not a WAV file") from exc
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32767.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise DataError("unsupported encoding")
    return AudioClip(samples, int(rate))


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """PCM16 mono; samples are clamped to [-1, 1] first."""
    pcm = np.round(np.clip(clip.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(Path(path), int(clip.sample_rate), pcm)


def write_wav_float(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    wavfile.write(Path(path), int(sample_rate), np.asarray(samples, dtype="<f4"))
