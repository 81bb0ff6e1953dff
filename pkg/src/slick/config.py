"""Run configuration: one JSON document validated before any work starts."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .blocks import ModelConfig
from .distill import DistillConfig
from .infer import NmsConfig
from .losses import LossWeights
from .train import OptimConfig, TrainConfig

STUDENT_DEFAULT = ModelConfig(channels=12, levels=2, query_dim=24, num_queries=10, kernel_size=1,
                              stem_stride=2, fusion_channels=6, fusion_dim=8)


class ConfigError(ValueError):
    """Schema violation; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config error at '{key}': {message}")
        self.key = key


@dataclass(frozen=True)
class DatasetConfig:
    path: str | None = None       # directory written by gen-data; generated in memory when unset
    num_train: int = 2000
    num_test: int = 200
    test_seed_offset: int = 100_000
    image_size: int = 64

    def __post_init__(self):
        if self.num_train < 0 or self.num_test < 0:
            raise ValueError("sample counts must be non-negative")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")


def _default_teacher_train() -> TrainConfig:
    return TrainConfig(epochs=4, batch_size=16)


def _default_student_train() -> TrainConfig:
    return TrainConfig(epochs=5, batch_size=16)


@dataclass
class RunConfig:
    teacher: ModelConfig = field(default_factory=ModelConfig)
    student: ModelConfig = STUDENT_DEFAULT
    loss_weights: LossWeights = field(default_factory=LossWeights)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optimizer: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-3))
    train: TrainConfig = field(default_factory=_default_teacher_train)
    distill_train: TrainConfig = field(default_factory=_default_student_train)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = _section_dict(v) if dataclasses.is_dataclass(v) else v
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed in the run."""
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed),
                                   distill_train=dataclasses.replace(self.distill_train, seed=seed))

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("<root>", "expected a JSON object")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        for key in d:
            if key not in sections:
                raise ConfigError(key, "unknown key")
        base = cls()
        kw: dict[str, Any] = {}
        for name, value in d.items():
            current = getattr(base, name)
            if name == "seed":
                if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                    raise ConfigError("seed", "expected a non-negative integer")
                kw[name] = value
            else:
                kw[name] = _build_section(name, type(current), current, value)
        cfg = cls(**kw)
        if "seed" in d:
            cfg = cfg.with_seed(cfg.seed)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _section_dict(obj) -> dict:
    d = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _check_type(key: str, default, value):
    """Values must match the JSON kind of the field default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        kind = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        kind = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        kind = "a number"
    elif isinstance(default, str):
        ok = isinstance(value, str)
        kind = "a string"
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                             for v in value)
        kind = "a list of numbers"
    elif default is None:
        ok = value is None or isinstance(value, str)
        kind = "a string or null"
    else:
        ok, kind = True, ""
    if not ok:
        raise ConfigError(key, f"expected {kind}, got {type(value).__name__}")
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value)
    return value


def _build_section(name: str, kind: type, default, value):
    if not isinstance(value, Mapping):
        raise ConfigError(name, "expected an object")
    fields = {f.name for f in dataclasses.fields(kind)}
    for key in value:
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
    kw = {key: _check_type(f"{name}.{key}", getattr(default, key), v) for key, v in value.items()}
    try:
        return dataclasses.replace(default, **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}.{_culprit(default, kw)}" if kw else name, str(exc)) from exc


def _culprit(default, kw: dict) -> str:
    """First key whose removal makes the section valid (else the first key)."""
    for key in kw:
        try:
            dataclasses.replace(default, **{k: v for k, v in kw.items() if k != key})
            return key
        except (ValueError, TypeError):
            continue
    return next(iter(kw))
