"""Declarative run configuration.

One YAML file drives everything: world generation, model shapes,
pre-training, and probes. Unknown keys are rejected rather than ignored
so a typo cannot silently fall back to a default. Every key is documented
in docs/config.md.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .model import ModelConfig
from .synthetic import WorldSpec


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass(frozen=True)
class DataConfig:
    n_samples: int = 512
    num_classes: int = 6
    region_grid: tuple[int, int] = (4, 4)
    cloud_rate: float = 0.0
    hr_size: int = 64
    ms_size: int = 16
    t_ms: int = 8
    t_sar: int = 4
    hr_noise: float = 0.10
    ms_noise: float = 0.02
    sar_noise: float = 0.03

    def world_spec(self, seed: int) -> WorldSpec:
        try:
            return WorldSpec(
                seed=seed,
                num_classes=self.num_classes,
                region_grid=tuple(self.region_grid),
                cloud_rate=self.cloud_rate,
                hr_size=self.hr_size,
                ms_size=self.ms_size,
                t_ms=self.t_ms,
                t_sar=self.t_sar,
                hr_noise=self.hr_noise,
                ms_noise=self.ms_noise,
                sar_noise=self.sar_noise,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e


@dataclass(frozen=True)
class GeoConfig:
    n_prototypes: int = 8
    momentum: float = 0.95
    sinkhorn_iters: int = 3
    # near-hard balanced assignment: fused features sit in a narrow
    # directional cone, and soft assignments there average all prototypes
    # onto one direction (an absorbing state uniform assignments never
    # leave); a small epsilon keeps the bank's fixed points distinct
    sinkhorn_epsilon: float = 0.002
    # bank EMA starts after this step, skipping the noisiest feature phase
    start_step: int = 150


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch_size: int = 8
    base_lr: float = 5e-4
    final_lr: float = 1e-5
    warmup_steps: int = 50
    weight_decay: float = 0.01  # shrinks shared feature offsets; see geo notes
    teacher_momentum: float = 0.996
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    head_hidden: int = 128
    head_out: int = 256
    align_dim: int = 64
    align_temp: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    n_clusters: int = 8
    cluster_iters: int = 3
    cluster_epsilon: float = 0.05  # object-level clustering assignment
    checkpoint_interval: int = 100
    t_ms_view: int = 4
    t_sar_view: int = 2
    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    local_crops: int = 2
    date_jitter: int = 7

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha and beta must be nonnegative")

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            global_scale=(self.crop_scale_min, self.crop_scale_max),
            t_ms_view=self.t_ms_view,
            t_sar_view=self.t_sar_view,
            date_jitter=self.date_jitter,
            local_crops=self.local_crops,
        )


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.02
    epochs: int = 40
    batch_size: int = 64
    weight_decay: float = 0.0


@dataclass(frozen=True)
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    geo: GeoConfig = field(default_factory=GeoConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.model.hr_size != self.data.hr_size or self.model.ms_size != self.data.ms_size:
            raise ConfigError(
                "model input sizes must match data sizes: "
                f"model ({self.model.hr_size}, {self.model.ms_size}) vs "
                f"data ({self.data.hr_size}, {self.data.ms_size})"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "geo": GeoConfig,
    "pretrain": PretrainConfig,
    "probe": ProbeConfig,
}


def _build_section(cls, raw: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' section: {e}") from e


def config_from_dict(raw: dict) -> Config:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = raw.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"'{name}' must be a mapping")
        sections[name] = _build_section(cls, sub, name)
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    try:
        return Config(seed=seed, **sections)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Path, seed_override: int | None = None) -> Config:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    if raw is None:
        raw = {}
    if seed_override is not None:
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        raw = dict(raw)
        raw["seed"] = seed_override
    return config_from_dict(raw)
