"""YAML run configuration: model / train / data / paths sections.

An empty (or absent) file yields the documented defaults; unknown keys are
rejected with their full dotted path; CLI flags override individual keys.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import AugmentConfig
from .model import ConfigError, ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    n_train: int = 64
    n_val: int = 16
    n_test: int = 8
    size: int = 64
    base_seed: int = 1000
    difficulty_mix: tuple = (0.6, 0.25, 0.15)

    def validate(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("data: split sizes must be >= 1")
        if self.size % 32 != 0 or self.size <= 0:
            raise ConfigError(
                f"data.size: must be a positive multiple of 32, got {self.size}")
        if len(self.difficulty_mix) != 3 or any(m < 0 for m in self.difficulty_mix):
            raise ConfigError("data.difficulty_mix: need three non-negative "
                              "proportions")
        return self


@dataclass
class PathsConfig:
    out_dir: str = "runs/run"
    dataset_dir: str = None
    checkpoint: str = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.augment.validate()
        return self

    def to_dict(self) -> dict:
        d = {
            "model": asdict(self.model),
            "train": asdict(self.train),
            "data": asdict(self.data),
            "augment": asdict(self.augment),
            "paths": asdict(self.paths),
        }
        # yaml-friendly: tuples -> lists
        return _tuples_to_lists(d)


_SECTION_TYPES = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "augment": AugmentConfig,
    "paths": PathsConfig,
}

# fields whose dataclass default is a tuple (yaml gives lists)
_TUPLE_FIELDS = {
    ("model", "stage_widths"), ("model", "blocks_per_stage"),
    ("model", "aspp_rates"), ("model", "decoder_widths"),
    ("data", "difficulty_mix"), ("augment", "contrast"), ("augment", "gamma"),
}


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def load_run_config(path=None) -> RunConfig:
    """Parse a YAML config file; a missing/empty file gives the defaults."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config: top level must be a mapping")
        raw = loaded
    return run_config_from_dict(raw)


def run_config_from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"config key {sorted(unknown)[0]!r} is not recognized")
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        body = raw.get(section, {})
        if body is None:
            body = {}
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        fields = {f.name for f in cls.__dataclass_fields__.values()}
        for key in body:
            if key not in fields:
                raise ConfigError(
                    f"config key {section}.{key!r} is not recognized")
        coerced = {}
        for key, value in body.items():
            if (section, key) in _TUPLE_FIELDS:
                if not isinstance(value, (list, tuple)):
                    raise ConfigError(
                        f"config key {section}.{key} must be a list")
                value = tuple(value)
            coerced[key] = value
        try:
            kwargs[section] = cls(**coerced)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config section {section}: {exc}") from exc
    config = RunConfig(**kwargs)
    config.validate()
    return config


def dump_resolved(config: RunConfig, path) -> None:
    """Write the fully-resolved configuration echo for the run."""
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True,
                       default_flow_style=False)
