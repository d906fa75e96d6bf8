"""Experiment configuration: one YAML document with nested sections.

Grammar (all sections optional except ``name``)::

    name: str
    seed: int
    output_dir: str | null
    dataset:      DatasetSpec fields
    model:        ModelSpec fields
    train:        TrainConfig fields, with a nested ``attack`` mapping
    eval_attacks: list of AttackConfig mappings
    analyses:     AnalysisFlags fields
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .data import DatasetSpec
from .models import ModelSpec
from .training import TrainConfig


def default_eval_attacks() -> list[AttackConfig]:
    return [AttackConfig(norm="Linf"), AttackConfig(norm="L2"), AttackConfig(norm="L1")]


@dataclass
class AnalysisFlags:
    sparsity: bool = False
    landscape: bool = False
    bounds: bool = False
    corruption: bool = False
    threshold_frac: float = 0.01
    landscape_points: int = 21
    landscape_span: float = 1.0
    landscape_samples: int = 256
    bound_gamma: float = 1.0
    bound_delta: float = 0.05
    bound_columns: int | None = 8


@dataclass
class ExperimentConfig:
    name: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_attacks: list[AttackConfig] = field(default_factory=default_eval_attacks)
    analyses: AnalysisFlags = field(default_factory=AnalysisFlags)
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("experiment name must be non-empty")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval_attacks": [a.to_dict() for a in self.eval_attacks],
            "analyses": dataclasses.asdict(self.analyses),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            name=d.get("name", ""),
            dataset=DatasetSpec(**d.get("dataset", {})),
            model=ModelSpec(**d.get("model", {})),
            train=TrainConfig(**d.get("train", {})),
            eval_attacks=[AttackConfig(**a) for a in d["eval_attacks"]] if "eval_attacks" in d else default_eval_attacks(),
            analyses=AnalysisFlags(**d.get("analyses", {})),
            seed=int(d.get("seed", 0)),
            output_dir=d.get("output_dir"),
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = ExperimentConfig.from_dict(self.to_dict())
        cfg.seed = seed
        cfg.train.seed = seed
        return cfg


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def loads(text: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(yaml.safe_load(text) or {})


def load_config(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
