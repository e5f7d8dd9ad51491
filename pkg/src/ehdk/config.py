"""
Flat ``key = value`` run configuration.

Keys are namespaced ``model.*``, ``train.*`` and ``data.*`` and map one to one
onto the fields of :class:`ModelConfig`, :class:`TrainConfig` and
:class:`SynthConfig`.  Blank lines and ``#`` comments are ignored.  Unknown
keys, repeated keys and unparsable values are errors.  Booleans are
``true``/``false``; tuples are comma-separated.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError, ParseError
from .model import ModelConfig
from .train import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SynthConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text, kind):
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return low == "true"
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _parse_value(text, default):
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(_parse_scalar(p, kind) for p in parts)
    return _parse_scalar(text, type(default))


def parse_config_text(text, source="<string>") -> RunConfig:
    values = {name: {} for name in SECTIONS}
    seen = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(source, line_no, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ParseError(source, line_no, f"duplicate key {key!r}")
        seen.add(key)
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        defaults = {f.name: f.default for f in fields(SECTIONS[section])}
        if name not in defaults:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r}")
        try:
            values[section][name] = _parse_value(value, defaults[name])
        except ValueError as exc:
            raise ParseError(source, line_no, f"bad value for {key}: {exc}") from None
    cfg = RunConfig(*(SECTIONS[s](**values[s]) for s in ("model", "train", "data")))
    return cfg.validate()


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(), str(path))


def dump_config(cfg: RunConfig, sections=("model", "train", "data")) -> str:
    """Canonical text form: sections in fixed order, fields in declaration order."""
    lines = []
    for section in sections:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def model_config_text(cfg: ModelConfig) -> str:
    return dump_config(RunConfig(model=cfg), sections=("model",))


def model_config_from_text(text) -> ModelConfig:
    return parse_config_text(text, "<checkpoint>").model
