"""JSON run configuration covering every module, with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .scene import PropagationParams, SceneConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DegradationSection:
    factor: int = 4
    noise_sigma: float = 30.0
    mask_mode: str = "oracle"
    tau_b: float = 8.0

    def __post_init__(self):
        if self.mask_mode not in ("oracle", "estimated"):
            raise ConfigError("mask_mode must be 'oracle' or 'estimated'")


@dataclass(frozen=True)
class NetSection:
    base_width: int = 16
    # None picks 2 for task A maps and 1 for the small task B matrices
    depth: int | None = None
    time_embed_dim: int = 32

    def depth_for(self, task: str) -> int:
        if self.depth is not None:
            return self.depth
        return 2 if task == "a" else 1


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 16
    lr: float = 2e-3
    epochs: int = 30


@dataclass(frozen=True)
class InferenceSection:
    steps: int = 10
    hermitian_projection: bool = True
    psd_clip: bool = False


@dataclass(frozen=True)
class DdpmSection:
    T: int = 250
    beta_start: float = 4e-4
    beta_end: float = 0.08


@dataclass(frozen=True)
class DataSection:
    ring_spacing: int = 2
    knn_k: int = 4
    test_fraction_pct: int = 10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str | None = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    propagation: PropagationParams = field(default_factory=PropagationParams)
    degradation: DegradationSection = field(default_factory=DegradationSection)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    ddpm: DdpmSection = field(default_factory=DdpmSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        typ = hints[key]
        if dataclasses.is_dataclass(typ):
            kwargs[key] = _build(typ, value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)
