"""Declarative ``section.key=value`` configuration.

Example file::

    # desk-scale run
    train.lr=5e-4
    train.betas=[0.9, 0.95]
    schedule.T_max=256
    mask.p_drop=0.3

Values are parsed as JSON when possible and kept as strings otherwise.
"""
from __future__ import annotations

import ast
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import ModelConfig
from .masking import MaskConfig
from .worldgen import WorldConfig


@dataclass
class TrainConfig:
    lr: float = 1e-5
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 1e-4
    warmup: int = 100
    p_mode1: float = 0.5
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 50
    ckpt_every: int = 500
    splat_value: str = "target"
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    heldout: int = 8
    max_hours: float = 4.0


@dataclass
class ScheduleConfig:
    T_max: int = 1000
    kind: str = "cosine"


@dataclass
class SampleConfig:
    steps: int = 50


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    world: WorldConfig = field(default_factory=WorldConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        return apply_overrides(cls(), {f"{s}.{k}": v for s, sub in d.items() for k, v in sub.items()})


def parse_value(text: str):
    text = text.strip()
    for parse in (json.loads, ast.literal_eval):
        try:
            return parse(text)
        except (ValueError, SyntaxError):
            continue
    return text


def parse_lines(lines) -> dict:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def apply_overrides(config: Config, values: dict) -> Config:
    sections = {f.name: getattr(config, f.name) for f in fields(config)}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise KeyError(f"unknown config key {key!r}")
        sub = sections[section]
        known = {f.name: f for f in fields(sub)}
        if name not in known:
            raise KeyError(f"unknown config key {key!r}")
        default = getattr(sub, name)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, bool):
            value = bool(value)
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        sections[section] = replace(sub, **{name: value})
    return Config(**sections)


def load_config(path=None, overrides=None) -> Config:
    config = Config()
    if path is not None:
        config = apply_overrides(config, parse_lines(Path(path).read_text().splitlines()))
    if overrides:
        config = apply_overrides(config, parse_lines(overrides) if isinstance(overrides, (list, tuple)) else overrides)
    return config


def dump_config(config: Config) -> str:
    lines = []
    for section, sub in config.to_dict().items():
        for key, value in sub.items():
            lines.append(f"{section}.{key}={json.dumps(list(value) if isinstance(value, tuple) else value)}")
    return "\n".join(lines) + "\n"
