"""Experiment configuration: one JSON document per experiment."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .trainer import TrainConfig

CRITERIA = ("cluster", "weight-sum", "apoz", "random", "scratch")


class ArchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: Literal["desk-cnn", "residual-cnn"] = "desk-cnn"
    filters: list[int] = Field(default_factory=lambda: [16, 32, 32], min_length=1)

    @field_validator("filters")
    @classmethod
    def _positive(cls, v):
        if any(n < 1 for n in v):
            raise ValueError("filter counts must be positive")
        return v

    def prunable_count(self) -> int:
        if self.name == "desk-cnn":
            return len(self.filters)
        return 1 + 3 * len(self.filters)


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    source: Literal["synthetic", "idx"] = "synthetic"
    seed: int = Field(0, ge=0)
    n_train: int = Field(2000, gt=0)
    n_test: int = Field(1000, gt=0)
    classes: int = Field(10, ge=2)
    size: int = Field(16, ge=4)
    difficulty: float = Field(0.5, ge=0, le=1)
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    apoz_samples: int = Field(500, gt=0, description="training images used to score APoZ")

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "idx":
            missing = [f for f in ("train_images", "train_labels", "test_images", "test_labels")
                       if getattr(self, f) is None]
            if missing:
                raise ValueError(f"idx source needs {', '.join(missing)}")
        return self


def _finetune_default() -> TrainConfig:
    return TrainConfig(lam=0.0, epochs=5, lr=0.005, lr_steps=[])


class CompareConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ratios: list[float] = Field(default_factory=lambda: [0.125, 0.25, 0.375, 0.5], min_length=1)
    criteria: list[Literal["cluster", "weight-sum", "apoz", "random", "scratch"]] = Field(
        default_factory=lambda: list(CRITERIA), min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    workers: int = Field(1, ge=1)

    @field_validator("ratios")
    @classmethod
    def _ratio_range(cls, v):
        if any(not 0 <= r <= 0.5 for r in v):
            raise ValueError("pruned ratios must lie in [0, 0.5]")
        return v


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arch: ArchConfig = Field(default_factory=ArchConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    # one ratio for every prunable layer, or one per prunable layer in order
    ratios: float | list[float] = 0.25
    criterion: Literal["cluster", "weight-sum", "apoz", "random", "scratch"] = "cluster"
    train: TrainConfig = Field(default_factory=TrainConfig)
    finetune: TrainConfig = Field(default_factory=_finetune_default)
    compare: CompareConfig = Field(default_factory=CompareConfig)
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def _ratios(self):
        rs = self.ratios if isinstance(self.ratios, list) else [self.ratios]
        if any(not 0 <= r <= 0.5 for r in rs):
            raise ValueError("ratios: every pruned ratio must lie in [0, 0.5]")
        if isinstance(self.ratios, list) and len(self.ratios) != self.arch.prunable_count():
            raise ValueError(
                f"ratios: {len(self.ratios)} values for {self.arch.prunable_count()} prunable layers"
            )
        return self


def _raise(e: ValidationError):
    parts = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    raise ConfigError("invalid config: " + "; ".join(parts)) from None


def parse_config(text: str) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as e:
        _raise(e)


def render_config(config: ExperimentConfig) -> str:
    return config.model_dump_json(indent=2) + "\n"


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return parse_config(Path(path).read_text())


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(render_config(config).encode()).hexdigest()


def apply_overrides(config: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    data = config.model_dump()
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config field {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config field {key!r}")
        node[parts[-1]] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        _raise(e)
