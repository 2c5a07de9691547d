"""Listener-centred panoramic observation of a shoebox room.

A panorama has three channels: depth to the first wall hit (metres), an
albedo proxy ``1 - alpha`` of that wall, and a binary mask where the ray
meets the speaker sphere. Column ``j`` looks along azimuth ``j * 360 / width``
degrees (counter-clockwise from +x); row ``i`` looks at elevation
``top - i * (top - bottom) / height``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .room import Pose, ShoeboxRoom, check_pose

CHANNELS = ("depth", "albedo", "speaker_mask")
TENSOR_MAGIC = b"VDRT"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class ViewConfig:
    width: int = 252
    height: int = 64
    elevation_top: float = 60.0
    elevation_bottom: float = -60.0
    fov_degrees: float = 80.0
    speaker_radius: float = 0.25

    def __post_init__(self):
        if not 0 < self.fov_degrees <= 360:
            raise UsageError("fov must lie in (0, 360]")
        if self.width <= 0 or self.height <= 0:
            raise UsageError("panorama size must be positive")


@dataclass
class Panorama:
    depth: np.ndarray
    albedo: np.ndarray
    speaker_mask: np.ndarray

    def __post_init__(self):
        if not (self.depth.shape == self.albedo.shape == self.speaker_mask.shape):
            raise DataError("panorama channel shapes differ")

    @property
    def shape(self):
        return self.depth.shape

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def stack(self) -> np.ndarray:
        return np.stack([self.depth, self.albedo, self.speaker_mask])

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "Panorama":
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise DataError(f"expected [3, H, W] panorama, got {arr.shape}")
        return cls(arr[0], arr[1], arr[2])

    def equals(self, other: "Panorama") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.stack(), other.stack()))


def ray_directions(cfg: ViewConfig, yaw_degrees: float = 0.0) -> np.ndarray:
    """Unit ray per pixel, shape [H, W, 3]."""
    # column arithmetic stays exact for column-aligned yaws
    cols = (np.arange(cfg.width) - yaw_degrees * cfg.width / 360.0) % cfg.width
    az = np.deg2rad(cols * 360.0 / cfg.width)
    step = (cfg.elevation_top - cfg.elevation_bottom) / cfg.height
    el = np.deg2rad(cfg.elevation_top - np.arange(cfg.height) * step)
    az, el = np.meshgrid(az, el)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def render_panorama(
    room: ShoeboxRoom,
    mic: Pose,
    src: Pose,
    cfg: ViewConfig = ViewConfig(),
    yaw_degrees: float = 0.0,
) -> Panorama:
    """Ray-cast the room from ``mic``.

    ``yaw_degrees`` turns the camera so that the result equals
    ``roll_panorama(render(..., yaw=0), yaw)`` for column-aligned yaws.
    """
    check_pose(room, mic)
    check_pose(room, src)
    dirs = ray_directions(cfg, yaw_degrees)
    o = mic.xyz
    dims = np.array(room.dims)

    # distance to each of the six planes along the ray; inf when moving away
    with np.errstate(divide="ignore", invalid="ignore"):
        t_low = np.where(dirs < 0, -o / dirs, np.inf)
        t_high = np.where(dirs > 0, (dims - o) / dirs, np.inf)
    t_walls = np.stack([t_low, t_high], axis=-1).reshape(*dirs.shape[:2], 6)
    wall = np.argmin(t_walls, axis=-1)
    depth = np.take_along_axis(t_walls, wall[..., None], axis=-1)[..., 0]
    albedo = 1.0 - np.asarray(room.absorption)[wall]

    rel = src.xyz - o
    t_near = dirs @ rel
    miss = np.linalg.norm(rel[None, None, :] - t_near[..., None] * dirs, axis=-1)
    mask = (t_near > 0) & (t_near < depth) & (miss <= cfg.speaker_radius)
    return Panorama(depth, albedo, mask.astype(np.float64))


def roll_panorama(img: Panorama, angle_degrees: float) -> Panorama:
    shift = int(round(angle_degrees / 360.0 * img.width))
    return Panorama.from_stack(np.roll(img.stack(), shift, axis=-1))


def crop_fov(img: Panorama, center_azimuth: float, fov_degrees: float) -> Panorama:
    """Wrapping column slice of width ``round(fov / 360 * width)`` around an azimuth.

    A full-circle crop starts at the azimuth instead, so at azimuth 0 it
    returns the panorama unchanged.
    """
    if not 0 < fov_degrees <= 360:
        raise DataError("fov must lie in (0, 360]")
    w = img.width
    n = int(round(fov_degrees / 360.0 * w))
    centre = int(round(center_azimuth / 360.0 * w))
    start = centre if n == w else centre - n // 2
    cols = (start + np.arange(n)) % w
    return Panorama.from_stack(img.stack()[:, :, cols])


def remove_speaker(img: Panorama) -> Panorama:
    return replace(img, speaker_mask=np.zeros_like(img.speaker_mask))


def save_tensor(path: str | Path, arr: np.ndarray, channel_names=CHANNELS) -> None:
    """Write ``arr`` as magic, version, dims, channel names, then float32 LE row-major."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    names = [n.encode() for n in channel_names]
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<HH", TENSOR_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(struct.pack("<H", len(names)))
        for n in names:
            fh.write(struct.pack("<H", len(n)) + n)
        fh.write(arr.tobytes())


def load_tensor(path: str | Path) -> tuple[np.ndarray, list[str]]:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise DataError("not a tensor file")
    version, ndim = struct.unpack_from("<HH", raw, 4)
    if version != TENSOR_VERSION:
        raise DataError(f"unsupported tensor version {version}")
    off = 8
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    (n_names,) = struct.unpack_from("<H", raw, off)
    off += 2
    names = []
    for _ in range(n_names):
        (ln,) = struct.unpack_from("<H", raw, off)
        names.append(raw[off + 2 : off + 2 + ln].decode())
        off += 2 + ln
    count = int(np.prod(shape))
    if len(raw) - off != 4 * count:
        raise DataError("tensor body size does not match header")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
    return arr.astype(np.float64), names


def save_panorama(path: str | Path, pano: Panorama) -> None:
    save_tensor(path, pano.stack(), CHANNELS)


def load_panorama(path: str | Path) -> Panorama:
    arr, names = load_tensor(path)
    if tuple(names) != CHANNELS:
        raise DataError(f"unexpected panorama channels {names}")
    return Panorama.from_stack(arr)
