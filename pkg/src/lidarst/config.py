"""Run configuration: JSON files, defaults, and dotted --set overrides.

A run is fully described by one SelfTrainConfig. Every command writes the
resolved config (all defaults expanded) beside its outputs so a run can be
reproduced from its artifacts plus the master seed.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .evaluation import EvalConfig
from .filtering import FilterConfig
from .gt_database import AugmentConfig
from .seed_labels import ClusterParams, SeedHeuristics
from .sim import SimDetectorParams, WorldConfig

DETECTOR_MODES = ("simulate", "external")


@dataclass
class SelfTrainConfig:
    """Everything the orchestrator needs for seed generation and self-training."""

    data_root: str = "data"
    max_rounds: int = 2
    master_seed: int = 42
    detector_mode: str = "simulate"
    train_cmd: str = ""
    infer_cmd: str = ""
    pp_radius: float = 0.3
    workers: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    seeds: SeedHeuristics = field(default_factory=SeedHeuristics)
    filter: FilterConfig = field(default_factory=FilterConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    detector: SimDetectorParams = field(default_factory=SimDetectorParams)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.detector_mode not in DETECTOR_MODES:
            raise ValueError(
                f"detector_mode must be one of {DETECTOR_MODES}, got {self.detector_mode!r}"
            )


def config_to_dict(obj: Any) -> Any:
    """Recursively convert a config dataclass to plain JSON types."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            f.name: config_to_dict(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
        }
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [config_to_dict(v) for v in obj]
    return obj


def config_from_dict(cls: type, data: dict) -> Any:
    """Hydrate a config dataclass, recursing into dataclass fields.

    Unknown keys are rejected; dataclass __post_init__ validation applies.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        target = f.type if isinstance(f.type, type) else None
        if target is None:
            # `from __future__ import annotations` leaves string annotations.
            target = _resolve_field_type(cls, f.name)
        if dataclasses.is_dataclass(target):
            kwargs[name] = config_from_dict(target, value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


def _resolve_field_type(cls: type, name: str) -> type | None:
    import typing

    hints = typing.get_type_hints(cls)
    t = hints.get(name)
    return t if isinstance(t, type) else None


def load_config(path: str | Path | None, overrides: tuple[str, ...] = ()) -> SelfTrainConfig:
    """Load a config file (or defaults) and apply key=value overrides."""
    if path is None:
        data: dict = {}
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    for ov in overrides:
        data = _set_in_dict(data, ov)
    return config_from_dict(SelfTrainConfig, data)


def apply_overrides(cfg: SelfTrainConfig, overrides: tuple[str, ...]) -> SelfTrainConfig:
    """Re-hydrate the config with dotted key=value overrides applied."""
    data = config_to_dict(cfg)
    for ov in overrides:
        data = _set_in_dict(data, ov)
    return config_from_dict(SelfTrainConfig, data)


def _set_in_dict(data: dict, override: str) -> dict:
    if "=" not in override:
        raise ConfigError(f"override must look like key=value, got {override!r}")
    key, raw = override.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"empty key in override {override!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {override!r}: {p} is not a section")
    node[parts[-1]] = value
    return data


def write_resolved_config(cfg: SelfTrainConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")
