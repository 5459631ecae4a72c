"""Experiment configuration: a YAML file validated strictly before any compute.

Unknown keys, wrong types and out-of-range values are rejected with the
dotted path of the offending key. ``--override a.b=value`` edits are applied
to the raw mapping first, so they go through the same validation.
"""
from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .datasets import registered_datasets
from .models import ARCHITECTURES, TrainSpec, num_attack_ics

DEFENSE_METHODS = ("neural_cleanse", "strip", "df_tnd", "unlearn", "finetune")
DEFENSE_TARGETS = ("backdoored", "badnets", "clean")


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Section):
    name: str = "shapes10"
    subsample: float = Field(1.0, gt=0.0, le=1.0)
    seed: int = 1
    # disjoint shares of the training split held by the attacker and the victim
    attacker_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    victim_fraction: float = Field(0.2, gt=0.0, lt=1.0)

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        known = registered_datasets()
        if v not in known:
            raise ValueError(f"unknown dataset {v!r}; registered: {', '.join(known)}")
        return v

    @model_validator(mode="after")
    def _shares(self):
        if self.attacker_fraction + self.victim_fraction > 1.0:
            raise ValueError("attacker_fraction + victim_fraction must not exceed 1")
        return self


class TrainSection(_Section):
    epochs: int = Field(15, ge=1)
    learning_rate: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(64, ge=1)
    weight_decay: float = Field(5e-4, ge=0.0)


class ModelSection(_Section):
    arch: str = "resnet-mini"
    train: TrainSection = TrainSection()

    @field_validator("arch")
    @classmethod
    def _known(cls, v):
        if v not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {v!r}; registered: {', '.join(sorted(ARCHITECTURES))}")
        return v


class TriggerSection(_Section):
    kind: Literal["checkerboard"] = "checkerboard"
    size: int = Field(7, ge=1)
    corner: Literal["bottom-right", "bottom-left", "top-right", "top-left"] = "bottom-right"


class AttackSection(_Section):
    exit_layer_ratio: float = Field(0.8, gt=0.0, lt=1.0)
    stealth_weight: float = Field(1.0, ge=0.0)
    ic_epochs: int = Field(20, ge=1)
    ic_lr: float = Field(1e-3, gt=0.0)
    ic_weight_decay: float = Field(0.005, ge=0.0)
    inject_epochs: int = Field(40, ge=1)
    inject_lr: float = Field(2e-3, gt=0.0)
    target_label: int = Field(0, ge=0)
    poison_fraction: float = Field(0.5, gt=0.0, le=1.0)
    batch_size: int = Field(64, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    stealth_triggered: bool = True
    trigger: TriggerSection = TriggerSection()


class BaselineSection(_Section):
    poison_fraction: float = Field(0.1, gt=0.0, le=1.0)
    # poisoned stamps blend in at an opacity drawn from [opacity_min, 1]; 1.0 is plain stamping
    opacity_min: float = Field(0.4, gt=0.0, le=1.0)


class VictimSection(_Section):
    starts: list[int] = [2, 3, 4]
    seeds: list[int] = [0, 1, 2]
    # null: calibrate per model on the victim's data
    threshold: float | None = Field(None, ge=0.0, le=1.0)
    early_fraction: float = Field(0.5, gt=0.0, le=1.0)
    # null: mirror the attacker's IC settings
    ic_epochs: int | None = Field(None, ge=1)
    ic_lr: float | None = Field(None, gt=0.0)
    ic_weight_decay: float | None = Field(None, ge=0.0)

    @field_validator("starts", "seeds")
    @classmethod
    def _non_empty_unique(cls, v):
        if not v:
            raise ValueError("must not be empty")
        if len(set(v)) != len(v):
            raise ValueError("entries must be unique")
        return v


class NeuralCleanseSection(_Section):
    steps: int = Field(800, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(0.1, gt=0.0)
    init_cost: float = Field(1e-2, gt=0.0)
    cost_multiplier: float = Field(1.5, gt=1.0)
    patience: int = Field(5, ge=1)
    success_threshold: float = Field(0.99, gt=0.0, le=1.0)
    early_stop_patience: int = Field(10, ge=1)
    max_samples: int = Field(500, ge=1)
    anomaly_threshold: float = Field(2.0, gt=0.0)


class StripSection(_Section):
    overlays: int = Field(64, ge=1)
    alpha: float = Field(0.5, gt=0.0, lt=1.0)
    clean_percentile: float = Field(1.0, gt=0.0, lt=100.0)
    flag_fraction: float = Field(0.5, gt=0.0, le=1.0)
    samples: int = Field(200, ge=1)


class DFTNDSection(_Section):
    seeds: int = Field(16, ge=1)
    steps: int = Field(200, ge=1)
    lr: float = Field(0.05, gt=0.0)
    threshold: float = Field(100.0, gt=0.0)
    layer: int | None = Field(None, ge=1)


class UnlearnSection(_Section):
    epochs: int = Field(5, ge=0)
    lr: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(64, ge=1)
    inner_steps: int = Field(5, ge=1)
    inner_lr: float = Field(0.1, gt=0.0)
    max_norm: float = Field(3.0, gt=0.0)


class FinetuneSection(_Section):
    epochs: int = Field(20, ge=0)
    lr: float = Field(0.01, gt=0.0)
    batch_size: int = Field(64, ge=1)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)


class DefenseSection(_Section):
    methods: list[Literal["neural_cleanse", "strip", "df_tnd", "unlearn", "finetune"]] = list(DEFENSE_METHODS)
    targets: list[Literal["backdoored", "badnets", "clean"]] = list(DEFENSE_TARGETS)
    # share of the victim's data the removers may train on
    clean_fraction: float = Field(0.25, gt=0.0, le=1.0)
    neural_cleanse: NeuralCleanseSection = NeuralCleanseSection()
    strip: StripSection = StripSection()
    df_tnd: DFTNDSection = DFTNDSection()
    unlearn: UnlearnSection = UnlearnSection()
    finetune: FinetuneSection = FinetuneSection()


class OutputSection(_Section):
    dir: str = "runs/default"
    formats: list[Literal["csv", "json"]] = ["csv", "json"]
    plots: bool = True


class ExperimentConfig(_Section):
    seed: int = 0
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    attack: AttackSection = AttackSection()
    baseline: BaselineSection = BaselineSection()
    victim: VictimSection = VictimSection()
    defense: DefenseSection = DefenseSection()
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _cross_checks(self):
        n = num_attack_ics(ARCHITECTURES[self.model.arch][1], self.attack.exit_layer_ratio)
        bad = [s for s in self.victim.starts if not 2 <= s <= n]
        if bad:
            raise ValueError(f"victim.starts entries {bad} outside 2..{n}")
        return self

    def train_spec(self) -> TrainSpec:
        return TrainSpec(seed=self.seed, **self.model.train.model_dump())

    def digest(self) -> str:
        """Hash of everything that affects results (the output section is excluded)."""
        payload = self.model_dump(exclude={"output"})
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        key = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{key}: {e['msg']}")
    return "invalid config: " + "; ".join(lines)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"override {text!r} has an empty key")
    return key.split("."), yaml.safe_load(raw)


def apply_overrides(raw: dict, overrides) -> dict:
    raw = json.loads(json.dumps(raw))
    for text in overrides or ():
        path, value = parse_override(text)
        node = raw
        for i, part in enumerate(path[:-1]):
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{'.'.join(path[:i + 1])}: is not a section")
            node = child
        node[path[-1]] = value
    return raw


def default_config_path() -> Path:
    return Path(str(resources.files("exitdoor") / "configs" / "default.yaml"))


def load_config(path: str | Path | None = None, overrides=()) -> ExperimentConfig:
    """Read, override and validate. ``path=None`` uses the shipped default config."""
    path = Path(path) if path is not None else default_config_path()
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    return validate_config(apply_overrides(raw, overrides))


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from None
