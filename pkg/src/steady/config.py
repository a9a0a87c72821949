"""Run configuration: every tunable in one serializable tree."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .baselines import SupervisedConfig, TvConfig
from .hovercraft import Excitation, HovParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 0
    n_train: int = 4
    n_valid: int = 4
    n_test: int = 8
    duration: float = 10.0
    sigma_deg: float = 5.0
    n_landmarks: int = 4


@dataclass
class EvalConfig:
    n_particles: int = 2000
    stride: int = 10
    horizon: int = 10
    seed: int = 2024


@dataclass
class SweepConfig:
    noise_levels_deg: tuple = (1.25, 2.5, 5.0, 10.0, 20.0)
    noise_methods: tuple = ("steady", "steady-minus", "fithand", "fittv")
    particle_counts: tuple = (200, 2000, 20_000)
    particle_max_steps: int | None = None
    repeats: int = 1


@dataclass
class RunConfig:
    hov: HovParams = field(default_factory=HovParams)
    excitation: Excitation = field(default_factory=Excitation)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)
    tv: TvConfig = field(default_factory=TvConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output_dir: str = "runs"

    def to_dict(self):
        return json.loads(json.dumps(asdict(self)))

    def hash(self, sections=None):
        """Content hash of the whole config, or of selected top-level sections.

        ``output_dir`` only says where results go, so it never enters the hash.
        """
        d = self.to_dict()
        d.pop("output_dir")
        if sections is not None:
            d = {k: d[k] for k in sections}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def data_hash(self):
        return self.hash(("hov", "excitation", "data"))


def full_scale():
    """Hyperparameters at the scale of the original experiments."""
    cfg = RunConfig()
    cfg.data.n_train, cfg.data.n_valid, cfg.data.n_test = 16, 32, 32
    cfg.train = TrainConfig(max_steps=40_000, n_particles=20_000)
    cfg.eval.n_particles = 20_000
    cfg.sweep.repeats = 3
    return cfg


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}")
        elif isinstance(default, tuple) or (default is None and isinstance(value, list)):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path}: {err}") from err


def from_dict(d):
    return _build(RunConfig, d, "config")


def load_config(path):
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    return from_dict(d)


def save_config(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
