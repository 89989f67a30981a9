"""Run configuration: one JSON document drives every subcommand.

Every field has a default sized so the whole pipeline finishes in minutes on
one CPU core; unknown keys are rejected with a field-level message. The root
seed feeds every stage unless a stage sets its own.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .align import AlignConfig
from .downstream import EvalConfig
from .model import ModelConfig
from .pretrain import PretrainConfig
from .rag import RagConfig


class ConfigError(ValueError):
    """Raised on unknown keys, wrong types, or invalid field values."""


@dataclass
class DataConfig:
    channels: int = 7
    timesteps: int = 168
    n_per_class: int = 40
    class_count: int = 10
    noise_scale: float = 0.1
    trend_scale: float = 1.0
    cycle_scale: float = 1.0
    spike_scale: float = 1.0
    shift_scale: float = 1.0


@dataclass
class ForecastConfig:
    history_len: int = 96
    horizon: int = 24


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(
            d=48, n_layers=2, n_heads=4, patch_len=12, channels=7, dropout=0.1
        )
    )
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(epochs=8, batch_size=32))
    align: AlignConfig = field(
        default_factory=lambda: AlignConfig(
            k=8, epochs=15, batch_size=32, temperature=0.2, weight_decay=0.0
        )
    )
    forecast: ForecastConfig = field(default_factory=ForecastConfig)
    rag: RagConfig = field(default_factory=lambda: RagConfig(epochs=8, batch_size=32))
    eval: EvalConfig = field(default_factory=EvalConfig)

    # artifact paths, all under out_dir
    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    @property
    def corpus_path(self) -> str:
        return self.path("corpus.jsonl")

    @property
    def pretrain_ckpt(self) -> str:
        return self.path("pretrained.ckpt")

    @property
    def aligned_ckpt(self) -> str:
        return self.path("aligned.ckpt")

    @property
    def index_path(self) -> str:
        return self.path("index.npz")


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "align": AlignConfig,
    "forecast": ForecastConfig,
    "rag": RagConfig,
    "eval": EvalConfig,
}


def _build_section(name: str, cls, raw: dict, default, root_seed: int):
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {f.name: getattr(default, f.name) for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"unknown key '{name}.{key}'")
        expected = allowed[key].type
        if expected in ("int",) and (not isinstance(value, int) or isinstance(value, bool)):
            raise ConfigError(f"field '{name}.{key}' must be an integer, got {value!r}")
        if expected in ("float",) and not isinstance(value, (int, float)):
            raise ConfigError(f"field '{name}.{key}' must be a number, got {value!r}")
        kwargs[key] = value
    if "seed" in allowed and "seed" not in raw:
        kwargs["seed"] = root_seed
    try:
        return cls(**kwargs)
    except ValueError as err:
        raise ConfigError(f"section '{name}': {err}") from err


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be an object")
    defaults = RunConfig()
    known = {"seed", "out_dir", *_SECTIONS}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{key}'")
    seed = raw.get("seed", defaults.seed)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"field 'seed' must be an integer, got {seed!r}")
    out_dir = raw.get("out_dir", defaults.out_dir)
    if not isinstance(out_dir, str):
        raise ConfigError(f"field 'out_dir' must be a string, got {out_dir!r}")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(name, cls, raw.get(name, {}), getattr(defaults, name), seed)
    return RunConfig(seed=seed, out_dir=out_dir, **sections)


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return run_config_from_dict({})
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err.msg}")
    return run_config_from_dict(raw)
