"""Dataset synthesis and the spectrogram segmentation shared by training and inference.

On-disk layout::

    root/<split>/manifest.jsonl
    root/<split>/sample_00042/{clean.wav, reverb.wav, pano.bin, meta.json}

Every sample draws from its own generator seeded by
``(seed, split code, index)``, so serial and parallel builds agree and
splits never share a stream.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import AudioClip, LogMagPhase, StftConfig
from .errors import DataError, UsageError
from .room import (
    Pose,
    ShoeboxRoom,
    convolve_rir,
    mix_at_snr,
    rt60_schroeder,
    simulate_rir,
)
from .speech import synthetic_speech
from .view import ViewConfig, load_panorama, render_panorama, save_panorama

log = logging.getLogger(__name__)

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
PEAK_LEVEL = 0.95
MAX_DRAWS = 100


@dataclass(frozen=True)
class RoomFamily:
    dims_min: tuple[float, float, float] = (3.0, 3.0, 2.4)
    dims_max: tuple[float, float, float] = (8.0, 7.0, 3.5)
    absorption_min: float = 0.1
    absorption_max: float = 0.6
    max_order: int = 30


@dataclass(frozen=True)
class SceneSamplerConfig:
    families: tuple[RoomFamily, ...] = (RoomFamily(),)
    distance_min: float = 0.5
    distance_max: float = 4.0
    samples_per_split: dict = field(default_factory=lambda: {"train": 32, "val": 8, "test": 8})
    rng_seed: int = 0
    clip_seconds: float = 1.0
    noise_corpus: str | None = None
    snr_db: float | None = None

    def __post_init__(self):
        object.__setattr__(
            self,
            "families",
            tuple(f if isinstance(f, RoomFamily) else RoomFamily(**_tuplify(f)) for f in self.families),
        )
        if not self.families:
            raise UsageError("sampler needs at least one room family")
        if self.distance_min < 0.3 or self.distance_max < self.distance_min:
            raise UsageError("distance range must satisfy 0.3 <= min <= max")
        for fam in self.families:
            if any(lo > hi for lo, hi in zip(fam.dims_min, fam.dims_max)):
                raise UsageError("empty room dimension range")
            if not 0 <= fam.absorption_min <= fam.absorption_max <= 1:
                raise UsageError("absorption range must lie in [0, 1]")


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass
class SampleMeta:
    sample_id: str
    family: int
    room_dims: list
    absorption: list
    src: list
    mic: list
    distance: float
    rt60: float | None
    gain: float
    direct_gain: float
    rng_seed: list
    config_digest: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "SampleMeta":
        return cls(**json.loads(line))


@dataclass
class Sample:
    path: Path
    clean: AudioClip
    reverb: AudioClip
    pano: "object"
    meta: SampleMeta


def sample_rng(seed: int, split: str, index: int) -> tuple[np.random.Generator, list]:
    key = [int(seed), SPLIT_CODES.get(split, 9), int(index)]
    return np.random.default_rng(key), key


def min_clean_samples(stft_cfg: StftConfig, window: int) -> int:
    """Shortest source clip that fills one full segment of ``window`` frames."""
    return stft_cfg.num_samples(window)


def draw_scene(sampler: SceneSamplerConfig, rng: np.random.Generator):
    """Draw (family index, room, src, mic) honouring the distance range."""
    fam_idx = int(rng.integers(len(sampler.families)))
    fam = sampler.families[fam_idx]
    for _ in range(MAX_DRAWS):
        dims = rng.uniform(fam.dims_min, fam.dims_max)
        alpha = rng.uniform(fam.absorption_min, fam.absorption_max, size=6)
        room = ShoeboxRoom(tuple(dims), tuple(alpha))
        lo = np.full(3, 0.5)
        hi = dims - 0.5
        if np.any(hi <= lo):
            continue
        mic = rng.uniform(lo, hi)
        src = rng.uniform(lo, hi)
        d = float(np.linalg.norm(src - mic))
        if sampler.distance_min <= d <= sampler.distance_max:
            return fam_idx, room, Pose(tuple(src)), Pose(tuple(mic))
    raise DataError("sampler exhausted")


def _noise_clip(sampler: SceneSamplerConfig, n: int, rng: np.random.Generator) -> AudioClip:
    if sampler.noise_corpus:
        files = sorted(Path(sampler.noise_corpus).glob("*.wav"))
        if not files:
            raise DataError(f"no WAV files in noise corpus {sampler.noise_corpus}")
        clip = dsp.read_wav(files[int(rng.integers(len(files)))])
        if len(clip) < n:
            reps = -(-n // len(clip))
            clip = AudioClip(np.tile(clip.samples, reps), clip.sample_rate)
        return clip
    return AudioClip(rng.standard_normal(n), dsp.SAMPLE_RATE)


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_sample(
    clean: AudioClip,
    sampler: SceneSamplerConfig,
    rng: np.random.Generator,
    out_dir: str | Path,
    sample_id: str = "sample_00000",
    view: ViewConfig = ViewConfig(),
    min_samples: int = 2 * dsp.SAMPLE_RATE,
    rng_key: list | None = None,
    config_digest: str = "",
) -> Path:
    """Render one reverberant/clean pair with its panorama into ``out_dir/sample_id``.

    The reverberant signal is peak-normalised to 0.95. The clean target is
    the source scaled by the direct-path amplitude and the same gain, so it
    matches the level of the direct sound inside the reverberant mix.
    """
    if clean.sample_rate != dsp.SAMPLE_RATE:
        raise DataError(f"clean audio must be {dsp.SAMPLE_RATE} Hz")
    if len(clean) < min_samples:
        raise DataError("clip too short")
    fam_idx, room, src, mic = draw_scene(sampler, rng)
    fam = sampler.families[fam_idx]
    rir = simulate_rir(room, src, mic, max_order=fam.max_order)
    try:
        rt60 = rt60_schroeder(rir)
    except DataError:
        rt60 = None
    pano = render_panorama(room, mic, src, view)

    reverb = convolve_rir(clean, rir).samples
    peak = np.max(np.abs(reverb))
    if peak <= 0:
        raise DataError("silent reverberant render")
    gain = PEAK_LEVEL / peak
    distance = float(np.linalg.norm(src.xyz - mic.xyz))
    direct_gain = 1.0 / (4.0 * np.pi * distance)
    reverb = reverb * gain
    target = clean.samples * gain * direct_gain
    if sampler.snr_db is not None:
        noise = _noise_clip(sampler, len(reverb), rng)
        reverb = mix_at_snr(AudioClip(reverb), noise, sampler.snr_db, rng).samples

    d = Path(out_dir) / sample_id
    d.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(d / "clean.wav", AudioClip(target))
    dsp.write_wav(d / "reverb.wav", AudioClip(reverb))
    save_panorama(d / "pano.bin", pano)
    meta = SampleMeta(
        sample_id=sample_id,
        family=fam_idx,
        room_dims=list(room.dims),
        absorption=list(room.absorption),
        src=list(src.position),
        mic=list(mic.position),
        distance=distance,
        rt60=rt60,
        gain=float(gain),
        direct_gain=float(direct_gain),
        rng_seed=list(rng_key or []),
        config_digest=config_digest,
    )
    (d / "meta.json").write_text(meta.to_json() + "\n")
    return d


def _corpus_files(corpus: str | Path | None) -> list[Path]:
    if corpus is None:
        return []
    files = sorted(Path(corpus).rglob("*.wav"))
    if not files:
        raise DataError(f"no WAV files found under {corpus}")
    return files


def build_split(
    root: str | Path,
    split: str,
    count: int,
    sampler: SceneSamplerConfig,
    view: ViewConfig = ViewConfig(),
    corpus: str | Path | None = None,
    min_samples: int = 2 * dsp.SAMPLE_RATE,
    config_digest: str = "",
) -> Path:
    """Build ``count`` samples of one split and write its manifest."""
    if count <= 0:
        raise DataError("empty split")
    split_dir = Path(root) / split
    split_dir.mkdir(parents=True, exist_ok=True)
    files = _corpus_files(corpus)
    records = []
    for i in range(count):
        rng, key = sample_rng(sampler.rng_seed, split, i)
        if files:
            clean = dsp.read_wav(files[i % len(files)])
        else:
            dur = max(sampler.clip_seconds, min_samples / dsp.SAMPLE_RATE)
            clean = synthetic_speech(dur, rng)
        sid = f"sample_{i:05d}"
        d = build_sample(clean, sampler, rng, split_dir, sid, view, min_samples, key, config_digest)
        records.append(
            {
                "id": sid,
                "files": {name: file_digest(d / name) for name in ("clean.wav", "reverb.wav", "pano.bin", "meta.json")},
            }
        )
        log.debug("built %s/%s", split, sid)
    header = {"split": split, "count": count, "seed": sampler.rng_seed, "config_digest": config_digest}
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps(r, sort_keys=True) for r in records]
    manifest = split_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(split_dir: str | Path) -> tuple[dict, list[dict]]:
    path = Path(split_dir) / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    lines = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
    if not lines:
        raise DataError(f"empty manifest {path}")
    return lines[0], lines[1:]


def verify_manifest(split_dir: str | Path) -> None:
    _, records = read_manifest(split_dir)
    for rec in records:
        for name, digest in rec["files"].items():
            if file_digest(Path(split_dir) / rec["id"] / name) != digest:
                raise DataError(f"content hash mismatch for {rec['id']}/{name}")


def load_sample(path: str | Path) -> Sample:
    d = Path(path)
    meta = SampleMeta.from_json((d / "meta.json").read_text().strip())
    return Sample(d, dsp.read_wav(d / "clean.wav"), dsp.read_wav(d / "reverb.wav"), load_panorama(d / "pano.bin"), meta)


def load_split(split_dir: str | Path) -> list[Sample]:
    _, records = read_manifest(split_dir)
    if not records:
        raise DataError("empty split")
    return [load_sample(Path(split_dir) / r["id"]) for r in records]


# --- segmentation -------------------------------------------------------------


@dataclass
class Segment:
    data: np.ndarray  # [2, window, F]
    start: int
    padded: bool


def segment_count(num_frames: int, window: int, hop: int) -> int:
    return -(-max(num_frames - window, 0) // hop) + 1


def segment_spectrogram(spec: LogMagPhase, window: int, hop: int | None = None) -> list[Segment]:
    """Cut [T, F] channels into 50%-overlapping windows along time.

    The last window is padded with silence (log of the magnitude floor,
    zero phase) when it runs past the end.
    """
    hop = window // 2 if hop is None else hop
    if window % 2 or hop != window // 2:
        raise DataError("window must be even with hop = window / 2")
    stacked = spec.stack()
    T = stacked.shape[1]
    if T == 0:
        raise DataError("empty spectrogram")
    out = []
    for k in range(segment_count(T, window, hop)):
        s = k * hop
        chunk = stacked[:, s : s + window]
        padded = chunk.shape[1] < window
        if padded:
            fill = np.zeros((2, window - chunk.shape[1], chunk.shape[2]))
            fill[0] = np.log(dsp.MAG_EPS)
            chunk = np.concatenate([chunk, fill], axis=1)
        out.append(Segment(np.array(chunk), s, padded))
    return out


def stitch_segments(segments, original_T: int) -> LogMagPhase:
    """Reassemble per-segment outputs keeping each segment's middle half.

    Accepts ``Segment`` objects or bare [2, window, F] arrays. The first
    segment also contributes its leading quarter and the last one everything
    after its first quarter, so each output frame is written exactly once.
    """
    arrays = [s.data if isinstance(s, Segment) else np.asarray(s) for s in segments]
    if not arrays:
        raise DataError("segment mismatch")
    window = arrays[0].shape[1]
    hop = window // 2
    q = window // 4
    if len(arrays) != segment_count(original_T, window, hop):
        raise DataError("segment mismatch")
    out = np.empty((2, original_T, arrays[0].shape[2]), dtype=arrays[0].dtype)
    n = len(arrays)
    for k, arr in enumerate(arrays):
        s = k * hop
        lo = 0 if k == 0 else q
        hi = window if k == n - 1 else 3 * q
        a, b = s + lo, min(s + hi, original_T)
        out[:, a:b] = arr[:, lo : lo + (b - a)]
    return LogMagPhase(out[0], out[1])


def spectrogram_pair(sample: Sample, stft_cfg: StftConfig) -> tuple[LogMagPhase, LogMagPhase]:
    """Log-mag/phase of reverberant and clean audio on the reverberant frame grid."""
    rev = sample.reverb.samples
    clean = sample.clean.samples
    if len(clean) < len(rev):
        clean = np.concatenate([clean, np.zeros(len(rev) - len(clean))])
    clean = clean[: len(rev)]
    return dsp.encode(dsp.stft(rev, stft_cfg)), dsp.encode(dsp.stft(clean, stft_cfg))
