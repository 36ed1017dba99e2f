"""Run configuration: one JSON document, with dotted-path overrides from the CLI."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .arch_zoo import ArchSpec
from .augment import AugmentConfig
from .errors import ConfigError
from .lion_optim import LionConfig
from .objectives import KDConfig
from .schedules import KeepRateConfig, LRConfig

PRESET_NAMES = ("baseline", "no_dp_kd", "no_dp", "no_kd", "full")


class TeacherConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arch: ArchSpec = Field(default_factory=lambda: ArchSpec(family="cnn3", width_profile="frepo"))
    checkpoint: Optional[str] = None
    epochs: Optional[int] = None


class AdamWConfig(BaseModel):
    """Settings for the adaptive comparator optimizer used when Lion is switched off."""

    model_config = ConfigDict(extra="forbid")

    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: str = ""
    eval_dataset: Optional[str] = None
    output_dir: str = "runs/default"
    preset: Literal["baseline", "no_dp_kd", "no_dp", "no_kd", "full"] = "full"
    seed: int = 0
    epochs: Optional[int] = None
    batch_size: Optional[int] = None
    eval_every: int = 50
    deterministic: bool = True

    student: ArchSpec = Field(default_factory=lambda: ArchSpec(family="resnet18"))
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    keep_rate: KeepRateConfig = Field(default_factory=KeepRateConfig)
    lr: LRConfig = Field(default_factory=LRConfig)
    kd: KDConfig = Field(default_factory=KDConfig)
    lion: LionConfig = Field(default_factory=LionConfig)
    adamw: AdamWConfig = Field(default_factory=AdamWConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)

    # per-component overrides of the preset's Misc. switch; None follows the preset
    optimizer: Optional[Literal["lion", "adamw-baseline"]] = None
    lr_schedule: Optional[Literal["periodic", "cosine"]] = None
    augment_mode: Optional[Literal["kfold", "single"]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.lr.T != self.keep_rate.T or self.lr.S != self.keep_rate.S:
            raise ValueError("lr.T/lr.S must equal keep_rate.T/keep_rate.S (the reset period is shared)")
        if self.epochs is not None and self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        return self

    @property
    def n_epochs(self) -> int:
        return self.keep_rate.N if self.epochs is None else self.epochs

    def to_dict(self) -> dict:
        return json.loads(self.model_dump_json())


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as JSON when possible."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = doc
        for key in keys[:-1]:
            child = node.get(key)
            if child is None:
                child = node[key] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override {path!r}: {key!r} is not a section")
            node = child
        node[keys[-1]] = parse_value(raw)
    return doc


def build_config(doc: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(f"invalid run config:\n{e}") from e
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid run config: {e}") from e


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    return build_config(apply_overrides(doc, overrides or []))
