"""Run configuration: one JSON document, every field required."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .data import DataConfig
from .errors import ConfigError
from .lda import LDAConfig
from .train import TrainConfig


@dataclass(frozen=True)
class ModelConfig:
    d: int
    depth: int
    synth_depth: int
    kernel_size: int
    weight_scale: float
    gamma0: float
    init_width: int
    init_depth: int


@dataclass(frozen=True)
class InitTrainConfig:
    epochs: int
    lr: float
    batch_size: int


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DataConfig
    model: ModelConfig
    lda: LDAConfig
    init_train: InitTrainConfig
    train: TrainConfig

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    missing = [n for n in fields if n not in raw]
    if missing:
        raise ConfigError(f"missing config field: {path}.{missing[0]}")
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config field: {path}.{unknown[0]}")
    kwargs = {}
    for name, f in fields.items():
        value = raw[name]
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        if sub is not None:
            value = _build(sub, value, f"{path}.{name}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "lda": LDAConfig,
             "init_train": InitTrainConfig, "train": TrainConfig}


def parse_config(raw: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, raw, "config")


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)
