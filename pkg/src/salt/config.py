"""Hierarchical JSON run configuration.

A config file may contain any of these sections; every key is checked against
the owning dataclass and unknown keys are rejected before work starts::

    {
      "seed": 0,
      "dataset": {...DatasetSpec fields...},
      "model": {"name": "tiny-L", ...ModelConfig overrides...},
      "optim": {...OptimConfig overrides...},
      "train": {...TrainPlan fields...},
      "probe": {...ProbeConfig fields...},
      "surprise": {...SurpriseConfig fields...}
    }

Model grid, tubelet and channel count always follow the dataset.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigError
from .evaluation import ProbeConfig, SurpriseConfig
from .models import ModelConfig, get_config
from .optim import OptimConfig
from .trainers import TrainPlan

SECTIONS = ("seed", "dataset", "model", "optim", "train", "probe", "surprise")


@dataclass
class RunConfig:
    seed: int = 0
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    surprise: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for key in SECTIONS[1:]:
            if key in d and not isinstance(d[key], dict):
                raise ConfigError(f"section {key!r} must be an object")
        rc = cls(**d)
        rc.validate()
        return rc

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        """Build every section once so type and range errors surface early."""
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        spec = self.dataset_spec()
        self.model_config(spec)
        plan = self.train_plan()
        self.optim_config(plan.steps)
        self.probe_config().validate()
        self.surprise_config().validate()

    # -- section builders -------------------------------------------------
    def dataset_spec(self) -> DatasetSpec:
        try:
            return DatasetSpec.from_dict({"seed": self.seed, **self.dataset})
        except TypeError as exc:
            raise ConfigError(f"dataset section: {exc}") from exc

    def model_config(self, spec: DatasetSpec | None = None) -> ModelConfig:
        section = dict(self.model)
        name = section.pop("name", "tiny-L")
        known = {f.name for f in dataclasses.fields(ModelConfig)} - {"name"}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        cfg = get_config(name, **section)
        if spec is not None:
            cfg = cfg.replace(grid=spec.grid, tubelet=spec.tubelet, channels=spec.channels)
        cfg.validate()
        return cfg

    def train_plan(self, **overrides) -> TrainPlan:
        d = {"seed": self.seed, **self.train}
        d.update({k: v for k, v in overrides.items() if v is not None})
        try:
            plan = TrainPlan.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"train section: {exc}") from exc
        if plan.steps < 1 or plan.batch_size < 1:
            raise ConfigError("train.steps and train.batch_size must be positive")
        return plan

    def optim_config(self, steps: int) -> OptimConfig:
        section = dict(self.optim)
        if "total_steps" in section and section["total_steps"] != steps:
            raise ConfigError(f"optim.total_steps={section['total_steps']} disagrees with {steps} train steps")
        section.pop("total_steps", None)
        known = {f.name for f in dataclasses.fields(OptimConfig)}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown optim keys: {sorted(unknown)}")
        cfg = OptimConfig.desk(steps, **section)
        cfg.validate()
        return cfg

    def probe_config(self, **overrides) -> ProbeConfig:
        d = {"seed": self.seed, **self.probe}
        d.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return ProbeConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"probe section: {exc}") from exc

    def surprise_config(self, **overrides) -> SurpriseConfig:
        d = dict(self.surprise)
        d.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in dataclasses.fields(SurpriseConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown surprise keys: {sorted(unknown)}")
        return SurpriseConfig(**d)
