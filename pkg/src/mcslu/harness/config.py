"""Run configuration: one schema, loadable from TOML or JSON.

The full normalized config is serialized verbatim into every result
manifest together with its hash, so any result file can be regenerated
bit-for-bit from the manifest alone.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..confidence import MODES, SCORE_SOURCES
from ..deliberation import NluConfig, TrainConfig
from ..scoreenc import ScoreEncoderConfig, ScoreTrainConfig
from ..simasr import NOISE_PRESETS, SimConfig


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


DEFAULT_FLIP_RATIOS = (0.0, 0.05, 0.13, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class RunConfig:
    """Everything an experiment run needs, validated up front."""

    sim: SimConfig = SimConfig()
    split_sizes: dict[str, int] = field(
        default_factory=lambda: {"train": 8000, "valid": 1000, "test": 2000}
    )
    nlu: NluConfig = NluConfig()
    train: TrainConfig = TrainConfig()
    score_encoder: ScoreEncoderConfig = ScoreEncoderConfig()
    score_train: ScoreTrainConfig = ScoreTrainConfig()
    balance_target: float = 0.5
    mode: str = "baseline"
    score_source: str = "oracle"
    constant_score: float = 1.0
    flip_ratio: float = 0.0
    flip_ratios: tuple[float, ...] = DEFAULT_FLIP_RATIOS
    presets: tuple[str, ...] = ("noisy", "medium", "clean")
    seeds: tuple[int, ...] = (0, 1, 2)
    n_workers: int = 1
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.score_source not in SCORE_SOURCES:
            raise ConfigError(f"score_source must be one of {SCORE_SOURCES}")
        for name in self.presets:
            if name not in NOISE_PRESETS:
                raise ConfigError(f"unknown preset {name!r}")
        for key in ("train", "valid", "test"):
            if self.split_sizes.get(key, 0) < 1:
                raise ConfigError(f"split_sizes[{key!r}] must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0.0 <= self.flip_ratio <= 1.0:
            raise ConfigError("flip_ratio must be in [0, 1]")
        if any(not 0.0 <= r <= 1.0 for r in self.flip_ratios):
            raise ConfigError("flip_ratios must lie in [0, 1]")
        if not 0.0 <= self.constant_score <= 1.0:
            raise ConfigError("constant_score must be in [0, 1]")
        if self.nlu.embed_dim != self.sim.embed_dim:
            raise ConfigError("nlu.embed_dim must match sim.embed_dim")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{path}]: {sorted(unknown)}")
    coerced = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid [{path}] section: {err}") from err


_SECTIONS = {
    "sim": SimConfig,
    "nlu": NluConfig,
    "train": TrainConfig,
    "score_encoder": ScoreEncoderConfig,
    "score_train": ScoreTrainConfig,
}


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    top = dict(data)
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in top:
            section = top.pop(name)
            if not isinstance(section, dict):
                raise ConfigError(f"[{name}] must be a table/object")
            kwargs[name] = _build_section(cls, section, name)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(top) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    for key, value in top.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from err


def load_config(path: str | Path) -> RunConfig:
    """Read a TOML or JSON config file into a validated RunConfig."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        if p.suffix == ".toml":
            data = tomllib.loads(p.read_text())
        elif p.suffix == ".json":
            data = json.loads(p.read_text())
        else:
            raise ConfigError(f"config must be .toml or .json, got {p.suffix!r}")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        raise ConfigError(f"could not parse {p}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table/object")
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    """Round-trippable plain-dict form (what manifests embed)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))
