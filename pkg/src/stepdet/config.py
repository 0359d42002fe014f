"""Experiment configuration: a versioned YAML document validated before any run."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .engine import EXTENSION_MODES, StepConfig
from .simulator import FAMILIES, SceneSpec

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "STEPDET_OUTPUT_DIR"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenesSection(_Section):
    n_scenes: int = Field(20, ge=1)
    width: float = Field(400.0, gt=0)
    height: float = Field(400.0, gt=0)
    n_frames: int = Field(30, ge=1)
    n_actors: tuple[int, int] = (1, 3)
    families: tuple[str, ...] = FAMILIES
    size_range: tuple[float, float] = (80.0, 200.0)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    speed_range: tuple[float, float] = (0.0, 4.0)
    scale_change: tuple[float, float] = (-0.01, 0.01)
    n_classes: int = Field(4, ge=1)
    min_action_fraction: float = Field(1.0, gt=0, le=1)

    @field_validator("families")
    @classmethod
    def _known_families(cls, v):
        bad = [f for f in v if f not in FAMILIES]
        if bad:
            raise ValueError(f"unknown trajectory families {bad}; expected a subset of {list(FAMILIES)}")
        return v

    @field_validator("n_actors", "size_range", "aspect_range", "speed_range", "scale_change")
    @classmethod
    def _ordered(cls, v):
        if v[0] > v[1]:
            raise ValueError("range lower bound exceeds upper bound")
        return v

    def scene_spec(self, seed: int) -> SceneSpec:
        d = self.model_dump(exclude={"n_scenes"})
        return SceneSpec(**d, seed=seed)


class StepsSection(_Section):
    s_max: int = Field(3, ge=1)
    k: int = Field(6, ge=1)
    extension: tuple[bool, ...] = (False, True, True)
    extension_mode: Literal["extrapolate", "anticipate", "none"] = "extrapolate"
    tau: tuple[float, ...] = (0.3, 0.4, 0.5)
    lam: float = Field(1.0, ge=0)
    gamma: float = Field(0.5, ge=0)
    n_pos: int = Field(8, ge=0)
    n_neg: int = Field(8, ge=0)

    def step_config(self) -> StepConfig:
        return StepConfig(**self.model_dump())


class ProposalsSection(_Section):
    layout: Literal["grid11", "pyramid34"] = "grid11"


class ModelSection(_Section):
    kind: Literal["oracle", "linear"] = "oracle"
    noise: float = Field(0.15, ge=0)
    sharpness: float = Field(10.0, gt=0)
    checkpoint: Optional[str] = None
    feature_noise: float = Field(0.0, ge=0)


class TrainingSection(_Section):
    iterations: int = Field(500, ge=1)
    lr: float = Field(0.05, gt=0)
    batch_size: int = Field(4, ge=1)


class LinkingSection(_Section):
    link_threshold: float = Field(0.3, ge=0, le=1)
    beta: float = Field(0.2, ge=0)
    nms_threshold: Optional[float] = Field(0.5, ge=0, le=1)


class EvaluationSection(_Section):
    iou_threshold: float = Field(0.5, gt=0, le=1)
    video_thresholds: tuple[float, ...] = (0.05, 0.1, 0.2, 0.5)
    histogram_bin: float = Field(0.1, gt=0, le=1)


class ExperimentConfig(_Section):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: Optional[str] = None
    jobs: int = Field(1, ge=1)
    scenes: ScenesSection = ScenesSection()
    steps: StepsSection = StepsSection()
    proposals: ProposalsSection = ProposalsSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    linking: LinkingSection = LinkingSection()
    evaluation: EvaluationSection = EvaluationSection()

    @field_validator("schema_version")
    @classmethod
    def _supported(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; this build reads version {SCHEMA_VERSION}")
        return v

    @model_validator(mode="after")
    def _steps_valid(self):
        try:
            self.steps.step_config()
        except ValueError as exc:
            raise ValueError(f"steps: {exc}") from None
        if self.steps.extension_mode not in EXTENSION_MODES:
            raise ValueError("steps: unknown extension mode")
        return self

    def resolved_output_dir(self) -> Path:
        """``output_dir`` if set, else the environment default, else ``./stepdet-out``."""
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_DIR_ENV) or "stepdet-out")

    def hashable(self) -> dict:
        # the output location does not change results
        d = self.model_dump(mode="json")
        d.pop("output_dir", None)
        d.pop("jobs", None)
        return d


class ConfigError(ValueError):
    pass


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        nxt = node.get(key)
        if nxt is None:
            nxt = node[key] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {dotted!r}: {key!r} is not a section")
        node = nxt
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value`` with the value read as YAML (so ``0.2``, ``true``, ``[1, 2]`` work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    return key, value


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the YAML document at ``path``, then ``overrides`` (dotted keys)."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        doc = loaded
    for key, value in (overrides or {}).items():
        _set_path(doc, key, value)
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        lines = [f"  {'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in exc.errors()]
        raise ConfigError("invalid config:\n" + "\n".join(lines)) from None


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
