"""Pipeline configuration: nested dataclasses, strict loading and a stable digest."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .dataset import RoomFamily, SceneSamplerConfig
from .dsp import StftConfig
from .errors import UsageError
from .model import ModelConfig, TrainConfig, UNetConfig, VanConfig
from .view import ViewConfig
from .wpe import WpeConfig


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    griffin_lim_iters: int = 30
    random_phase_init: bool = False
    segsnr_frame: int = 256
    distance_edges: tuple[float, ...] = (0.0, 1.0, 2.0, 3.0, float("inf"))
    rt60_edges: tuple[float, ...] = (0.0, 0.3, 0.5, 0.7, float("inf"))
    fov_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distance_edges", tuple(self.distance_edges))
        object.__setattr__(self, "rt60_edges", tuple(self.rt60_edges))


@dataclass(frozen=True)
class PipelineConfig:
    stft: StftConfig = field(default_factory=StftConfig.desk)
    sampler: SceneSamplerConfig = field(default_factory=SceneSamplerConfig)
    view: ViewConfig = field(default_factory=ViewConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    wpe: WpeConfig = field(default_factory=WpeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def digest(self) -> str:
        return config_digest(self)

    def model_digest(self) -> str:
        """Digest of everything that fixes the network's shapes and inputs."""
        return config_digest({"stft": to_dict(self.stft), "model": to_dict(self.model)})

    def to_json(self) -> str:
        return json.dumps(to_dict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return from_dict(cls, data)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
        return cls.from_dict(data)


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp) and isinstance(value, dict):
        return from_dict(tp, value, where)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(tp)
        inner = args[0] if args else None
        if inner is not None and dataclasses.is_dataclass(inner):
            return tuple(from_dict(inner, v, f"{where}[{i}]") if isinstance(v, dict) else v for i, v in enumerate(value))
        return tuple(value)
    return value


def from_dict(cls, data: dict, where: str = ""):
    """Build ``cls`` from a mapping, rejecting keys the dataclass does not declare."""
    if not isinstance(data, dict):
        raise UsageError(f"config section {where or cls.__name__} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise UsageError(f"unknown config keys in {where or cls.__name__}: {', '.join(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def config_digest(obj) -> str:
    """SHA-256 (first 16 hex digits) of the key-sorted JSON form."""
    payload = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def config_keys(cls, prefix: str = "") -> list[str]:
    """Dotted names of every leaf key under a config dataclass."""
    out = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        name = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(tp):
            out.extend(config_keys(tp, name + "."))
        else:
            out.append(name)
    return out


__all__ = [
    "EvalConfig",
    "PipelineConfig",
    "RoomFamily",
    "SceneSamplerConfig",
    "StftConfig",
    "ModelConfig",
    "VanConfig",
    "UNetConfig",
    "TrainConfig",
    "ViewConfig",
    "WpeConfig",
    "config_digest",
    "config_keys",
    "from_dict",
    "to_dict",
]
