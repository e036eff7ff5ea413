"""Typed run configuration: one YAML document drives every stage.

The file mirrors the stage config dataclasses section by section, so every
tunable of the tracker, mapper, field, and loss is representable and keeps
its library default when omitted.  Unknown keys are rejected rather than
ignored; a typo'd parameter must never silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field as datafield
from pathlib import Path
from typing import Optional

import yaml

from .field import FieldConfig
from .losses import LossConfig, LossMode
from .mapping import KFPolicy, MapperConfig, WindowStrategy
from .tracking import TrackerConfig


class ConfigError(ValueError):
    """Configuration could not be parsed or validated."""


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    out_dir: str = ""
    seed: int = 0
    deterministic_mode: bool = True
    mode: LossMode = LossMode.JS_DYNAMIC
    weight_formula: str = "paper"
    tracker: TrackerConfig = datafield(default_factory=TrackerConfig)
    mapper: MapperConfig = datafield(default_factory=MapperConfig)
    field: FieldConfig = datafield(default_factory=FieldConfig)
    loss: LossConfig = datafield(default_factory=LossConfig)

    def __post_init__(self) -> None:
        if self.weight_formula not in ("paper", "alpha"):
            raise ConfigError(f"weight_formula must be 'paper' or 'alpha', got {self.weight_formula!r}")


_SECTIONS = {
    "tracker": TrackerConfig,
    "mapper": MapperConfig,
    "field": FieldConfig,
    "loss": LossConfig,
}
_ENUM_FIELDS = {"kf_policy": KFPolicy, "window_strategy": WindowStrategy, "mode": LossMode}


def _parse_enum(cls: type, value, where: str):
    if isinstance(value, cls):
        return value
    try:
        return cls(value)
    except ValueError:
        options = ", ".join(m.value for m in cls)
        raise ConfigError(f"{where}: {value!r} is not one of: {options}") from None


def _build_section(cls: type, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _ENUM_FIELDS:
            value = _parse_enum(_ENUM_FIELDS[key], value, f"{where}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top_fields)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    kwargs: dict = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build_section(_SECTIONS[key], value or {}, key)
        elif key == "mode":
            kwargs[key] = _parse_enum(LossMode, value, "mode")
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def apply_override(raw: dict, assignment: str) -> None:
    """In-place dotted override, e.g. 'mapper.n_rays=128'; values parse as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    dotted, text = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ConfigError(f"override {assignment!r} has an empty key")
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {assignment!r}: {exc}") from None
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path: str | Path, overrides: Optional[list[str]] = None) -> RunConfig:
    """Parse a YAML config file, then apply dotted overrides on top."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = raw or {}
    for assignment in overrides or []:
        apply_override(raw, assignment)
    return from_dict(raw)


def _plain(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    """Round-trippable plain-dict echo for manifests (enums and tuples flattened)."""
    out: dict = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            out[f.name] = {
                g.name: _plain(getattr(value, g.name)) for g in dataclasses.fields(value)
            }
        else:
            out[f.name] = _plain(value)
    return out
