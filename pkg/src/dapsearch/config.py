"""Flat ``key = value`` run configuration with environment overrides.

One file holds both the world keys and the training keys (their names do not
overlap).  Precedence, lowest first: dataclass defaults, file, ``DAPSEARCH_*``
environment variables, explicit overrides passed by the caller.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .synthworld import WorldConfig
from .trainer import TrainConfig

ENV_PREFIX = "DAPSEARCH_"
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class ConfigError(ValueError):
    """Unknown key, malformed line, or a value of the wrong type."""


def _field_types(cls) -> dict[str, str]:
    return {f.name: f.type for f in fields(cls)}


WORLD_KEYS = _field_types(WorldConfig)
TRAIN_KEYS = _field_types(TrainConfig)
ALL_KEYS = {**WORLD_KEYS, **TRAIN_KEYS}


def parse_value(key: str, text: str):
    kind = ALL_KEYS[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {text!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = parse_value(key, value)
    return values


def env_overrides(env: Mapping[str, str]) -> dict:
    values = {}
    for name, text in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower()
        if key not in ALL_KEYS:
            raise ConfigError(f"environment variable {name}: unknown key {key!r}")
        values[key] = parse_value(key, text)
    return values


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    source: str | None = None

    def echo(self) -> dict:
        out = {f.name: getattr(self.world, f.name) for f in fields(WorldConfig)}
        out.update({f.name: getattr(self.train, f.name) for f in fields(TrainConfig)})
        return out


def build_config(values: Mapping, source: str | None = None) -> RunConfig:
    unknown = [k for k in values if k not in ALL_KEYS]
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    world = replace(WorldConfig(), **{k: v for k, v in values.items() if k in WORLD_KEYS})
    train = replace(TrainConfig(), **{k: v for k, v in values.items() if k in TRAIN_KEYS})
    try:
        world.validate()
        train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(world, train, source)


def load_config(path: str | Path | None = None, env: Mapping[str, str] | None = None,
                overrides: Mapping | None = None) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(env_overrides(os.environ if env is None else env))
    values.update(overrides or {})
    return build_config(values, None if path is None else str(path))
