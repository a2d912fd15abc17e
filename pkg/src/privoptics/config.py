"""Experiment configuration: a versioned YAML schema with strict validation.

Unknown keys are rejected so that a typo in ``lam`` or ``n_adv_steps`` fails
before any compute. The fingerprint covers everything that influences results
(the output root does not) and names the run directory.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import TOY_DESIRED, TOY_SENSITIVE, AttributePair
from .models import ClassifierSpec, ReconstructorSpec
from .optics import SensorGeometry
from .training import GapConfig, IsConfig, TrainConfig

SCHEMA_VERSION = 1


class ConfigInvalid(ValueError):
    """Configuration failed to parse or validate."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ToySection(_Strict):
    n: int = Field(4000, ge=10)
    seed: int = 0

    @model_validator(mode="after")
    def _even(self):
        if self.n % 2:
            raise ValueError("toy n must be even")
        return self


class DatasetSection(_Strict):
    source: Literal["toy", "celeba"] = "toy"
    toy: ToySection = ToySection()
    image_dir: Optional[str] = None
    attribute_table: Optional[str] = None
    partition: Optional[str] = None
    attributes: Optional[list[str]] = None
    workers: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "celeba" and not (self.image_dir and self.attribute_table):
            raise ValueError("celeba source needs image_dir and attribute_table")
        return self


class PairSection(_Strict):
    desired: str = TOY_DESIRED
    sensitive: str = TOY_SENSITIVE


class GeometrySection(_Strict):
    kernel_size: tuple[int, int] = (100, 100)
    input_size: tuple[int, int] = (64, 64)
    pad: int = Field(49, ge=0)
    stride: int = Field(2, ge=1)
    radial_profile: Optional[tuple[list[float], list[float]]] = None
    scale_alpha: float = 1.0
    scale_gamma: float = 1.0


class ClassifierSection(_Strict):
    backbone: Literal["small-cnn", "vgg11-like", "mobilenetv2-like"] = "small-cnn"
    input_norm: Literal["frame", "none"] = "frame"


class TrainSection(_Strict):
    epochs: int = Field(15, ge=1)
    lr: float = Field(0.002, gt=0)
    batch_size: int = Field(64, ge=1)
    init_scheme: Literal["uniform", "midpoint-noise"] = "midpoint-noise"
    checkpoint_every: int = Field(0, ge=0)


class GapSection(_Strict):
    lam: float = Field(1.0, ge=0)
    n_adv_steps: int = Field(2, ge=1)
    batch_size: int = Field(64, ge=1)


class IsSection(_Strict):
    lam: float = Field(0.1, ge=0)
    batch_size: int = Field(32, ge=2)
    distance_cap: Optional[float] = Field(None, gt=0)


class ReconstructorSection(_Strict):
    conv_stages: int = Field(3, ge=1)
    channels: int = Field(64, ge=1)
    conv_kernel: int = Field(3, ge=1)
    epochs: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(64, ge=1)
    grid_samples: int = Field(8, ge=1)


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs"
    backend: Literal["auto", "direct", "fft"] = "auto"
    strategy: Literal["baseline", "gap", "is"] = "baseline"
    dataset: DatasetSection = DatasetSection()
    pair: PairSection = PairSection()
    geometry: GeometrySection = GeometrySection()
    analyzer: ClassifierSection = ClassifierSection()
    adversary: ClassifierSection = ClassifierSection()
    attacker: ClassifierSection = ClassifierSection()
    train: TrainSection = TrainSection()
    gap: GapSection = GapSection()
    is_: IsSection = Field(IsSection(), alias="is")
    reconstructor: ReconstructorSection = ReconstructorSection()

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @model_validator(mode="after")
    def _consistent(self):
        if self.pair.desired == self.pair.sensitive:
            raise ValueError("desired and sensitive attributes must differ")
        try:
            self.sensor_geometry()
        except ValueError as exc:
            raise ValueError(f"geometry: {exc}") from None
        return self

    # -- derived objects -------------------------------------------------
    def sensor_geometry(self) -> SensorGeometry:
        g = self.geometry
        return SensorGeometry(kernel_size=g.kernel_size, input_size=g.input_size, pad=g.pad,
                              stride=g.stride,
                              radial_profile=None if g.radial_profile is None
                              else (tuple(g.radial_profile[0]), tuple(g.radial_profile[1])),
                              scale_alpha=g.scale_alpha, scale_gamma=g.scale_gamma)

    def attribute_pair(self) -> AttributePair:
        return AttributePair(self.pair.desired, self.pair.sensitive)

    def _classifier(self, section: ClassifierSection) -> ClassifierSpec:
        return ClassifierSpec(backbone=section.backbone, input_size=self.sensor_geometry().output_size,
                              input_norm=section.input_norm)

    def analyzer_spec(self) -> ClassifierSpec:
        return self._classifier(self.analyzer)

    def adversary_spec(self) -> ClassifierSpec:
        return self._classifier(self.adversary)

    def attacker_spec(self) -> ClassifierSpec:
        return self._classifier(self.attacker)

    def reconstructor_spec(self) -> ReconstructorSpec:
        r = self.reconstructor
        return ReconstructorSpec(conv_stages=r.conv_stages, channels=r.channels,
                                 conv_kernel=r.conv_kernel, backend=self.backend)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, lr=t.lr, batch_size=t.batch_size, seed=self.seed,
                           init_scheme=t.init_scheme)

    def strategy_config(self) -> Union[TrainConfig, GapConfig, IsConfig]:
        t = self.train
        if self.strategy == "gap":
            return GapConfig(lam=self.gap.lam, n_adv_steps=self.gap.n_adv_steps, epochs=t.epochs,
                             lr=t.lr, batch_size=self.gap.batch_size, seed=self.seed,
                             init_scheme=t.init_scheme)
        if self.strategy == "is":
            return IsConfig(lam=self.is_.lam, batch_size=self.is_.batch_size, epochs=t.epochs,
                            lr=t.lr, seed=self.seed, distance_cap=self.is_.distance_cap,
                            init_scheme=t.init_scheme)
        return self.train_config()

    def decoder_config(self) -> TrainConfig:
        r = self.reconstructor
        return TrainConfig(epochs=r.epochs or self.train.epochs, lr=self.train.lr,
                           batch_size=r.batch_size, seed=self.seed)

    # -- identity ----------------------------------------------------------
    def canonical(self) -> dict:
        d = self.model_dump(mode="json", by_alias=True)
        d.pop("out")
        # sections a strategy never reads must not split its run directory
        if self.strategy != "gap":
            d.pop("gap")
            d.pop("adversary")
        if self.strategy != "is":
            d.pop("is")
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def data_fingerprint(self) -> str:
        d = {"schema_version": self.schema_version,
             "dataset": self.dataset.model_dump(mode="json"),
             "input_size": list(self.geometry.input_size)}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def run_dir(self) -> Path:
        return Path(self.out) / f"{self.strategy}-{self.fingerprint()[:12]}"

    def data_dir(self) -> Path:
        return Path(self.out) / f"data-{self.data_fingerprint()[:12]}"

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json", by_alias=True), sort_keys=False)


def _flatten_errors(exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(data: Optional[dict], **overrides) -> ExperimentConfig:
    data = dict(data or {})
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigInvalid(_flatten_errors(exc)) from None


def load_config(path: Union[str, Path, None], **overrides) -> ExperimentConfig:
    """Read a YAML config (or defaults when ``path`` is None) and apply overrides."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigInvalid(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigInvalid(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigInvalid(f"{path}: top level must be a mapping")
    return parse_config(data, **overrides)
