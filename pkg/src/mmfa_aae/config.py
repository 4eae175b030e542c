"""Flat ``key = value`` run configuration covering model, train, data and eval settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .evaluate import EvalConfig
from .model import ModelConfig
from .settings import format_value, parse_value
from .train import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SynthConfig, "eval": EvalConfig}


class ConfigError(ValueError):
    """A run config that cannot be parsed or holds an invalid value."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    def items(self):
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def to_text(self) -> str:
        return "".join(f"{key} = {format_value(value)}\n" for key, value in self.items())

    def set(self, key: str, text: str) -> None:
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = parse_value(text, getattr(SECTIONS[section](), name))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
        setattr(getattr(self, section), name, value)

    def copy(self) -> "RunConfig":
        return RunConfig(*(dataclasses.replace(getattr(self, s)) for s in SECTIONS))


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text; keys not mentioned keep their defaults (or ``base``'s values)."""
    config = base.copy() if base is not None else RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            config.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    config.validate()
    return config


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def defaults_help() -> str:
    return "\n".join(f"  {key} = {format_value(value)}" for key, value in RunConfig().items())
