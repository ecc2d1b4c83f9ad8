"""Experiment configuration: a YAML document validated against a strict schema.

Unknown keys are rejected, and validation errors carry the YAML line of the
offending key.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .gpgs import GPGSConfig
from .kernels import KernelConfig, MeanConfig
from .scene import SceneSpec
from .svgp import FitConfig

InitVariant = Literal["timeseries", "random", "velocity-knn"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class InducingConfig(_Strict):
    variants: list[InitVariant] = ["timeseries"]
    m_spatial: int = Field(8, ge=1)
    m_time: int = Field(6, ge=1)

    @field_validator("variants")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one init variant is required")
        return v


class GPGSSection(_Strict):
    """Stage-2 settings; kernel, mean, inducing sizes and GP optimizer come from the top level."""

    iterations: int = Field(600, ge=1)
    n_gp: int = Field(200, ge=1)
    lambda_gp: float = Field(0.1, ge=0)
    tau_start: float = Field(0.1, gt=0)
    tau_end: float = Field(0.01, gt=0)
    beta: float = Field(0.01, ge=0)
    lr: float = Field(1e-2, gt=0)
    lr_final: float = Field(1e-4, gt=0)
    percentile: float = Field(50.0, ge=0, le=100)
    input_noise: float = Field(0.02, ge=0)  # variance, normalized spatial units
    warm_iterations: int = Field(150, ge=0)
    cameras: int = Field(1, ge=1)
    image_size: int = Field(64, ge=8)


class ExtrapolateSection(_Strict):
    horizons: list[int] = [5, 15]
    scenes: list[Literal["windmill", "slider", "mixed"]] = ["windmill", "slider"]

    @field_validator("horizons")
    @classmethod
    def _positive(cls, v):
        if not v or any(h < 1 for h in v):
            raise ValueError("empty holdout")
        return v


class UncertaintySection(_Strict):
    samples: int = Field(32, ge=2)
    map_frames: list[int] = [0]
    image_size: int = Field(64, ge=8)


class ExperimentConfig(_Strict):
    seeds: list[int] = [0]
    scene: SceneSpec = SceneSpec()
    kernel: KernelConfig = KernelConfig()
    mean: MeanConfig = MeanConfig()
    noise_variance: float = Field(1e-2, gt=0)
    inducing: InducingConfig = InducingConfig()
    optimizer: FitConfig = FitConfig()
    gpgs: GPGSSection = GPGSSection()
    extrapolate: ExtrapolateSection = ExtrapolateSection()
    uncertainty: UncertaintySection = UncertaintySection()

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @model_validator(mode="after")
    def _fits_sequence(self):
        T = self.scene.frames
        if max(self.extrapolate.horizons) > T - 2:
            raise ValueError(f"holdout must leave at least 2 of the {T} frames for training")
        if any(not 0 <= f < T for f in self.uncertainty.map_frames):
            raise ValueError("uncertainty map frame outside the sequence")
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seeds": [seed]})

    def gpgs_config(self, **overrides) -> GPGSConfig:
        g = self.gpgs.model_dump()
        noise = g.pop("input_noise")
        g.update(m_spatial=self.inducing.m_spatial, m_time=self.inducing.m_time,
                 gp_fit=self.optimizer.model_copy(update={"input_noise": noise}), kernel=self.kernel, mean=self.mean,
                 noise_variance=self.noise_variance)
        g.update(overrides)
        return GPGSConfig(**g)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _line_of(node, loc) -> int | None:
    """1-based line of the deepest YAML node reachable along ``loc``."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = next(((k, v) for k, v in node.value if k.value == str(key)), None)
            if nxt is None:
                break
            line = nxt[0].start_mark.line + 1
            node = nxt[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
    return line


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: malformed YAML: {getattr(e, 'problem', e)}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        lines = []
        for err in e.errors():
            loc = [p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-"))]
            line = _line_of(node, loc)
            path = ".".join(str(p) for p in loc) or "<root>"
            lines.append(f"{source}:{line}: {path}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from e


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config(text, str(path))
