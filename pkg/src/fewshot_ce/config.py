"""Declarative experiment configuration.

A config file is YAML (JSON also parses) with optional top-level sections
``dataset``, ``model``, ``train`` and ``experiment``. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .channel import ScenarioSpec


class ConfigError(ValueError):
    pass


def default_scenarios() -> list[ScenarioSpec]:
    # disjoint delay-spread and decay ranges keep the scenarios separable
    return [
        ScenarioSpec("compact", (2, 6), (5, 8), (0.3, 0.6), 0.3),
        ScenarioSpec("moderate", (4, 10), (14, 22), (0.08, 0.15), 0.3),
        ScenarioSpec("extended", (6, 16), (34, 48), (0.02, 0.05), 0.3),
    ]


@dataclass
class DatasetConfig:
    path: str = "data"
    seed: int = 0
    pdps_per_scenario: int = 50
    realizations_per_pdp: int = 200
    heldout_pdps_per_scenario: int = 10
    scenarios: list[ScenarioSpec] = field(default_factory=default_scenarios)


@dataclass
class ModelConfig:
    w: int = 72
    feature_channels: int = 16
    extractor_hidden: int = 16
    cam_reduction: int = 4
    cam_tau: float = 0.05
    cam_attention_mode: str = "joint"
    cin_hidden: int = 8
    tam_hidden: int = 8
    tam_printed_form: bool = False
    backbone_hidden_layers: int = 3
    backbone_channels: int = 32
    backbone_kernel: int = 5
    query_skip: bool = False
    se_reduction: int = 4

    def validate(self) -> None:
        if self.w % self.cam_reduction:
            raise ConfigError(f"w={self.w} is not divisible by cam_reduction={self.cam_reduction}")
        if self.cam_tau <= 0:
            raise ConfigError("cam_tau must be positive")
        if self.cam_attention_mode not in ("joint", "per_block"):
            raise ConfigError(f"unknown cam_attention_mode {self.cam_attention_mode!r}")
        if self.backbone_kernel % 2 == 0:
            raise ConfigError("backbone_kernel must be odd")
        if self.backbone_hidden_layers < 0:
            raise ConfigError("backbone_hidden_layers must be >= 0")


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_kind: str = "mse"
    train_snr_db: float = 20.0
    episodes_per_epoch: int = 2048
    epochs: int = 10
    n_support: int = 16
    # when non-empty, each batch draws its support count uniformly from this list
    n_support_train_grid: list[int] = field(default_factory=list)
    seed: int = 0
    switchnet_subnets: int = 5
    switchnet_ridge: float = 1e-3
    switchnet_samples_per_scenario: int = 4000

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_kind not in ("mse", "bce_scaled"):
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")
        if self.n_support < 0:
            raise ConfigError("n_support must be >= 0")
        if any(n < 1 for n in self.n_support_train_grid):
            raise ConfigError("n_support_train_grid entries must be >= 1")
        if self.switchnet_subnets < 1:
            raise ConfigError("switchnet_subnets must be >= 1")


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/desk"
    checkpoint_dir: str = ""
    snr_grid_db: list[float] = field(default_factory=lambda: [5.0, 10.0, 15.0, 20.0, 25.0])
    n_support_grid: list[int] = field(default_factory=lambda: [0, 1, 2, 4, 8, 16, 32])
    eval_samples: int = 500
    eval_pdps_per_scenario: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    sweep_snr_db: float = 20.0
    mismatch_snr_db: float = 20.0
    eval_batch: int = 250
    switchnet_online_steps: int = 200
    switchnet_online_lr: float = 0.05
    classifier_epochs: int = 8
    boundary_epochs: int = 0

    def validate(self) -> None:
        if self.eval_samples < 1:
            raise ConfigError("eval_samples must be >= 1")
        for s in self.snr_grid_db:
            if s != s or s in (float("inf"), float("-inf")):
                raise ConfigError("snr_grid_db values must be finite")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")


@dataclass
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def validate(self) -> "Config":
        self.model.validate()
        self.train.validate()
        self.experiment.validate()
        for spec in self.dataset.scenarios:
            try:
                spec.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dataset"]["scenarios"] = [s.to_dict() for s in self.dataset.scenarios]
        return d

    def hash(self) -> str:
        return self.hash_dict(self.to_dict())

    @staticmethod
    def hash_dict(d: dict) -> str:
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if cls is DatasetConfig and key == "scenarios":
            kwargs[key] = [_scenario(v, f"{where}.scenarios[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _scenario(d, where: str) -> ScenarioSpec:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(ScenarioSpec)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return ScenarioSpec(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict | None) -> Config:
    data = data or {}
    sections = {"dataset": DatasetConfig, "model": ModelConfig, "train": TrainConfig, "experiment": ExperimentConfig}
    if not isinstance(data, dict):
        raise ConfigError("config: expected a mapping at top level")
    unknown = sorted(set(data) - set(sections))
    if unknown:
        raise ConfigError(f"config: unknown section(s) {', '.join(unknown)}")
    parts = {name: _build(cls, data.get(name, {}), name) for name, cls in sections.items()}
    return Config(**parts).validate()


def load_config(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)
