"""YAML configuration documents mirroring RunConfig, with dotted overrides."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .core import ConfigError, RateConfig
from .learner import TeacherOracle, TrainingConfig
from .scenarios import PartitionKind, PretrainMode, PretrainSpec
from .sim import RunConfig
from .slow_route import Mode
from .world import WorldConfig

# fields filled in by the engine, never read from a document
_DERIVED = {"TeacherOracle": {"n_classes"}}

_SECTIONS = {
    "world": WorldConfig,
    "rates": RateConfig,
    "training": TrainingConfig,
    "teacher": TeacherOracle,
    "pretrain": PretrainSpec,
}


@dataclass(frozen=True)
class MatrixSpec:
    scenarios: tuple[str, ...] = tuple(k.value for k in PartitionKind)
    pretrains: tuple[str, ...] = tuple(m.value for m in PretrainMode)
    modes: tuple[str, ...] = (Mode.TTA.value, Mode.OL.value)
    adapt: tuple[bool, ...] = (True,)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        try:
            for s in self.scenarios:
                PartitionKind(s)
            for p in self.pretrains:
                PretrainMode(p)
            for m in self.modes:
                Mode(m)
        except ValueError as exc:
            raise ConfigError(f"matrix: {exc}") from None
        if not (self.scenarios and self.pretrains and self.modes and self.adapt and self.seeds):
            raise ConfigError("matrix: every axis needs at least one value")


@dataclass(frozen=True)
class Document:
    run: RunConfig
    matrix: MatrixSpec = field(default_factory=MatrixSpec)
    scale_to_horizon: float | None = None
    source: str = "<defaults>"

    def resolved(self, seed: int | None = None) -> RunConfig:
        cfg = self.run if seed is None else self.run.with_seed(seed)
        if self.scale_to_horizon is not None and self.scale_to_horizon != cfg.world.horizon:
            cfg = cfg.scaled(self.scale_to_horizon)
        return cfg

    def to_dict(self) -> dict[str, Any]:
        out = _dump(self.run)
        out["scale_to_horizon"] = self.scale_to_horizon
        out["matrix"] = _dump(self.matrix)
        return out

    def config_hash(self) -> str:
        """Content hash of everything that can change results, except the seed."""
        body = self.to_dict()
        body.pop("matrix")
        body.pop("workers")  # parallelism never changes outputs
        body["world"].pop("seed")
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _dump(obj) -> dict[str, Any]:
    skip = _DERIVED.get(type(obj).__name__, set())
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _dump(v)
        elif isinstance(v, enum.Enum):
            v = v.value
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _coerce(value, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        elem = args[0] if args else Any
        if len(args) == 2 and args[1] is Ellipsis or len(args) <= 1:
            return tuple(_coerce(v, elem, where) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, where) for v, a in zip(value, args))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, str):
            # YAML 1.1 reads forms like 1e-3 as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(value)
        except ValueError:
            choices = ", ".join(m.value for m in hint)
            raise ConfigError(f"{where}: {value!r} is not one of {choices}") from None
    return value


def _build(cls, data: dict[str, Any], where: str, **ready):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(cls.__name__, set())
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    kwargs.update(ready)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict[str, Any] | None, source: str = "<dict>") -> Document:
    data = dict(data or {})
    matrix = _build(MatrixSpec, data.pop("matrix", None) or {}, "matrix")
    scale = data.pop("scale_to_horizon", None)
    if scale is not None:
        scale = _coerce(scale, float, "scale_to_horizon")
        if scale <= 0:
            raise ConfigError("scale_to_horizon must be positive")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build(cls, data.pop(name, None) or {}, name)
    run = _build(RunConfig, data, "", **sections)
    return Document(run, matrix, scale, source)


def set_path(data: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {dotted!r}")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r} descends into a non-mapping")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} must look like key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    return key.strip(), value


def load(path: str | Path | None, overrides: list[str] = ()) -> Document:
    """Read a YAML document (or defaults when ``path`` is None) and apply overrides."""
    data: dict[str, Any] = {}
    source = "<defaults>"
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        source = str(p)
    for text in overrides:
        set_path(data, *parse_override(text))
    return from_dict(data, source)


def dump_yaml(doc: Document) -> str:
    return yaml.safe_dump(doc.to_dict(), sort_keys=False, default_flow_style=None)
