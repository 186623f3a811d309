"""Run configuration: one YAML tree, validated on load, unknown keys rejected.

Defaults are the full-scale training values; :func:`desk_config` returns the
scaled-down profile that trains the toy policy in a few minutes on one core.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .env import EnvConfig
from .pipeline import PipelineConfig
from .rewards import RepetitionConfig, RewardWeights, THINK_CLOSE, THINK_OPEN
from .tags import TagRegistry


class ConfigError(ValueError):
    pass


def _positive(section, *names: str) -> None:
    for name in names:
        if getattr(section, name) < 1:
            raise ConfigError(f"{type(section).__name__}.{name} must be positive")


@dataclass(frozen=True)
class RewardSection:
    alpha: float = 0.8
    beta: float = 0.8
    gamma: float = 0.2
    think_open: str = THINK_OPEN
    think_close: str = THINK_CLOSE
    generation_metric: str = "rouge1"

    def __post_init__(self):
        if self.generation_metric not in ("rouge1", "rougeL"):
            raise ConfigError(f"generation_metric must be rouge1 or rougeL, got {self.generation_metric!r}")

    @property
    def weights(self) -> RewardWeights:
        return RewardWeights(self.alpha, self.beta, self.gamma)


@dataclass(frozen=True)
class PrmuSection:
    dim: int = 512
    lr: float = 100.0
    epochs: int = 20
    batch_size: int = 32
    n_prp: int = 10_000
    n_pqp: int = 10_000
    pqp_noise: float = 0.5

    def __post_init__(self):
        _positive(self, "dim", "batch_size")


@dataclass(frozen=True)
class SftSection:
    lr: float = 1e-5
    epochs: int = 2
    batch_size: int = 64
    n_examples: int = 10_000
    extra_tag_prob: float = 0.5

    def __post_init__(self):
        _positive(self, "batch_size", "n_examples")


@dataclass(frozen=True)
class GspoSection:
    G: int = 5
    eps_low: float = 0.0003
    eps_high: float = 0.0004
    temperature: float = 1.0
    top_p: float = 1.0
    lr: float = 1e-6
    batch_size: int = 128
    max_len: int = 32
    eps_std: float = 1e-8
    inner_steps: int = 1

    def __post_init__(self):
        if self.G < 2:
            raise ConfigError("gspo.G must be >= 2")
        if not (0 < self.eps_low < 1 and 0 < self.eps_high < 1):
            raise ConfigError("gspo clip ratios must lie in (0, 1)")
        _positive(self, "batch_size", "max_len", "inner_steps")


@dataclass(frozen=True)
class ScheduleSection:
    guided_epochs: int = 13
    exploratory_epochs: int = 2
    rl_prompts: int = 10_000


@dataclass(frozen=True)
class EvalSection:
    n_tasks: int = 2000
    seed: int = 30_000
    sample_temperature: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    run_dir: str = "runs/default"
    clients: str = "mock"
    registry: TagRegistry = field(default_factory=TagRegistry)
    rewards: RewardSection = field(default_factory=RewardSection)
    repetition: RepetitionConfig = field(default_factory=RepetitionConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    prmu: PrmuSection = field(default_factory=PrmuSection)
    sft: SftSection = field(default_factory=SftSection)
    gspo: GspoSection = field(default_factory=GspoSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.clients not in ("mock", "http"):
            raise ConfigError(f"clients must be 'mock' or 'http', got {self.clients!r}")

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(current, bool):
            kwargs[name] = bool(value)
        elif isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "config")


def load_config(path: str | Path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data or {})


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


DESK_OVERRIDES = {
    "run_dir": "runs/desk",
    "prmu": {"n_prp": 1000, "n_pqp": 1000},
    "sft": {"lr": 0.3, "epochs": 2, "batch_size": 16, "n_examples": 500},
    "gspo": {"lr": 10.0, "batch_size": 32},
    "schedule": {"guided_epochs": 13, "exploratory_epochs": 2, "rl_prompts": 2048},
    "pipeline": {"instances_per_task": 50},
}


def desk_config(**overrides) -> RunConfig:
    """Small profile for a single desktop core; values are tuned for this toy setting."""
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in DESK_OVERRIDES.items()}
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(data.get(k), dict):
            data[k].update(v)
        else:
            data[k] = v
    return config_from_dict(data)
