"""Flat, versioned experiment configuration.

The config file is a flat TOML table; every key below is optional and
unknown keys are rejected. Example (the Branin protocol)::

    version = 1
    task = "branin"
    n_samples = 5000
    trim_top_fraction = 0.1
    p = 20.0
    horizon = 64
    n_traj = 400
    k = 20
    epsilon = 0.01
    T = 200
    omega = 1.2
    x0_clip = 1.0
    n_sample_trajs = 4
    context = 32
    alpha = 0.8
    q = 128
    seeds = [0, 1, 2]
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    # dataset: generated from ``task`` unless ``dataset_path`` is given
    task: str = "branin"
    dataset_path: str = ""
    n_samples: int = 5000
    trim_top_fraction: float = 0.10
    space: str = "continuous"
    # trajectory construction (epsilon in normalized-score units)
    p: float = 20.0
    horizon: int = 64
    n_traj: int = 400
    k: int = 20
    epsilon: float = 0.01
    # diffusion
    T: int = 200
    schedule: str = "linear"
    omega: float = 1.2
    guidance_mode: str = "cfg"
    x0_clip: float = 1.0  # 0 disables clipping of predicted clean designs
    # denoiser
    hidden: int = 256
    n_blocks: int = 3
    time_dim: int = 64
    batch_size: int = 128
    learning_rate: float = 1e-4
    train_steps: int = 50_000
    dropout_p: float = 0.25
    ema_decay: float = 0.0  # 0 disables the parameter average
    # proxy
    proxy_hidden: tuple[int, ...] = (1024, 1024)
    proxy_batch_size: int = 128
    proxy_learning_rate: float = 1e-3
    proxy_train_steps: int = 5000
    rank_k: float = 0.01
    # sampling
    n_sample_trajs: int = 4
    context: int = 32
    alpha: float = 0.8
    target_mode: str = "known"  # known | gamma
    gamma: float = 1.0
    # selection
    q: int = 128
    seeds: tuple[int, ...] = (0, 1, 2)

    def validate(self) -> "ExperimentConfig":
        problems = []
        if self.version != CONFIG_VERSION:
            problems.append(f"unsupported config version {self.version}")
        if self.space not in ("continuous", "discrete"):
            problems.append(f"space must be continuous|discrete, got {self.space!r}")
        if not self.dataset_path:
            if self.n_samples < 10:
                problems.append("n_samples must be >= 10")
            if not 0.0 <= self.trim_top_fraction < 1.0:
                problems.append("trim_top_fraction must be in [0, 1)")
        if not 0 < self.p <= 100:
            problems.append("p must be in (0, 100]")
        if self.horizon < 2:
            problems.append("horizon must be >= 2")
        if self.n_traj < 1:
            problems.append("n_traj must be >= 1")
        if self.k < 1:
            problems.append("k must be >= 1")
        if not self.epsilon >= 0:
            problems.append("epsilon must be >= 0")
        if self.T < 1:
            problems.append("T must be >= 1")
        if self.schedule not in ("cosine", "linear"):
            problems.append(f"schedule must be cosine|linear, got {self.schedule!r}")
        if self.omega < 0:
            problems.append("omega must be >= 0")
        if not self.x0_clip >= 0:
            problems.append("x0_clip must be >= 0")
        if self.guidance_mode not in ("cfg", "inpaint"):
            problems.append(f"guidance_mode must be cfg|inpaint, got {self.guidance_mode!r}")
        for name in ("hidden", "n_blocks", "time_dim", "batch_size", "proxy_batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("learning_rate", "proxy_learning_rate"):
            if not getattr(self, name) >= 0:
                problems.append(f"{name} must be >= 0")
        for name in ("train_steps", "proxy_train_steps"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0.0 <= self.dropout_p <= 1.0:
            problems.append("dropout_p must be in [0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            problems.append("ema_decay must be in [0, 1)")
        if any(u < 1 for u in self.proxy_hidden):
            problems.append("proxy_hidden widths must be >= 1")
        if not self.rank_k > 0:
            problems.append("rank_k must be > 0")
        if self.n_sample_trajs < 1:
            problems.append("n_sample_trajs must be >= 1")
        if not 0 <= self.context < self.horizon:
            problems.append(f"context must be in [0, horizon={self.horizon})")
        if self.target_mode not in ("known", "gamma"):
            problems.append(f"target_mode must be known|gamma, got {self.target_mode!r}")
        if self.target_mode == "gamma" and not self.gamma > 0:
            problems.append("gamma must be > 0")
        if self.q < 1:
            problems.append("q must be >= 1")
        elif self.context < self.horizon:
            available = self.n_sample_trajs * (self.horizon - self.context)
            if self.q > available:
                problems.append(
                    f"q={self.q} exceeds the {available} harvested candidates "
                    f"(n_sample_trajs * (horizon - context))"
                )
        if not self.seeds:
            problems.append("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            problems.append("seeds must be distinct")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["proxy_hidden"] = list(self.proxy_hidden)
        out["seeds"] = list(self.seeds)
        return out

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return from_mapping({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, value):
    default = getattr(ExperimentConfig, name, None) if name in _FIELDS else None
    if name in ("proxy_hidden", "seeds"):
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{name} must be a list of integers")
        return tuple(int(v) for v in value)
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{name}: booleans are not accepted")
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value
    return value


def from_mapping(data: dict) -> ExperimentConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {name: _coerce(name, value) for name, value in data.items()}
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found tables: {', '.join(nested)}")
    return from_mapping(data)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config as flat TOML that ``load_config`` reads back."""
    lines = [f"# experiment config, schema version {CONFIG_VERSION}"]
    for name, value in cfg.to_dict().items():
        lines.append(f"{name} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict) -> str:
    blob = json.dumps(values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def replace_seeds(cfg: ExperimentConfig, seeds) -> ExperimentConfig:
    return replace(cfg, seeds=tuple(int(s) for s in seeds)).validate()


__all__ = [
    "CONFIG_VERSION",
    "ConfigError",
    "ExperimentConfig",
    "config_hash",
    "dump_config",
    "from_mapping",
    "load_config",
    "replace_seeds",
    "field",
]
