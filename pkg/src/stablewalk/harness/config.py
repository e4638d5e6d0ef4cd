"""Experiment configuration: nested frozen dataclasses loaded from YAML with strict keys."""

from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from stablewalk.biped.env import CommandRanges, EnvConfig
from stablewalk.biped.model import SimConfig
from stablewalk.biped.observations import ObsConfig
from stablewalk.errors import ConfigurationError
from stablewalk.learn.cts import CTSConfig
from stablewalk.learn.networks import NetworkConfig
from stablewalk.learn.ppo import PPOConfig
from stablewalk.rewards import RewardConfig
from stablewalk.terrain import KINDS, CurriculumConfig

VARIANTS = ("full", "no_stable_reward", "no_stable_critic", "no_rfm", "l2_velocity_reward")


@dataclass(frozen=True)
class TrainingConfig:
    iterations: int = 200
    n_envs: int = 256
    rollout_steps: int = 24
    teacher_fraction: float = 0.5
    estimator_lr: float = 1e-3
    estimator_epochs: int = 4
    checkpoint_every: int = 50
    workers: int = 1
    randomize_start: bool = True


@dataclass(frozen=True)
class TerrainSetup:
    """Training terrains: one kind per environment slot, difficulty from the curriculum."""

    kinds: tuple[str, ...] = ("flat",)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    terrain_seed: int = 0


@dataclass(frozen=True)
class EvaluationConfig:
    episodes: int = 128
    steps: int = 500
    terrains: tuple[str, ...] = ("flat",)
    difficulty: float = 0.5
    command: tuple[float, float, float] = (0.5, 0.0, 0.0)
    workers: int = 1


@dataclass(frozen=True)
class PushConfig:
    regime: str = "moderate"
    episodes: int = 128
    bins: int = 4
    duration: float = 0.1
    earliest: float = 1.0
    latest: float = 8.0
    terrain: str = "flat"


@dataclass(frozen=True)
class SweepConfig:
    speeds: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    terrains: tuple[str, ...] = ("stairs",)


@dataclass(frozen=True)
class AblationConfig:
    variants: tuple[str, ...] = ("full", "no_stable_reward")


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str = "full"
    seeds: tuple[int, ...] = (0, 1, 2)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    terrain: TerrainSetup = field(default_factory=TerrainSetup)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    push: PushConfig = field(default_factory=PushConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    observation: ObsConfig = field(default_factory=ObsConfig)
    commands: CommandRanges = field(default_factory=CommandRanges)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    k_p: float = 2.0
    domain_randomization: bool = True
    observation_noise: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        for name in (*self.terrain.kinds, *self.evaluation.terrains, *self.sweep.terrains, self.push.terrain):
            if name not in KINDS:
                raise ConfigurationError(f"unknown terrain kind {name!r}")
        for v in self.ablation.variants:
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown ablation variant {v!r}")
        if self.training.iterations < 0 or self.training.n_envs < 1:
            raise ConfigurationError("iterations must be >= 0 and n_envs >= 1")

    # -- derived configs --------------------------------------------------------------------------

    def with_variant(self, variant: str) -> "ExperimentConfig":
        return replace(self, variant=variant)

    def variant_reward(self) -> RewardConfig:
        r = self.reward
        if self.variant == "no_stable_reward":
            return replace(r, use_stable_reward=False)
        if self.variant == "no_rfm":
            return replace(r, fusion="additive")
        if self.variant == "l2_velocity_reward":
            return replace(r, velocity_form="l2")
        return r

    def env_config(self) -> EnvConfig:
        return EnvConfig(sim=self.sim, reward=self.variant_reward(), obs=self.observation,
                         commands=self.commands, k_p=self.k_p, domain_randomization=self.domain_randomization,
                         observation_noise=self.observation_noise, history_length=self.network.history)

    def cts_config(self) -> CTSConfig:
        t = self.training
        ppo = replace(self.ppo, double_critic=self.ppo.double_critic and self.variant != "no_stable_critic")
        return CTSConfig(network=self.network, ppo=ppo, rollout_steps=t.rollout_steps,
                         teacher_fraction=t.teacher_fraction, estimator_lr=t.estimator_lr,
                         estimator_epochs=t.estimator_epochs)

    def to_dict(self) -> dict:
        return to_plain(self)

    def hash(self) -> str:
        """Short stable digest of the full configuration."""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def to_plain(obj):
    if is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigurationError(f"{path} must be a mapping")
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path} must be a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigurationError(f"{path} must have {len(args)} entries")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path} must be a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path} must be an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path} must be true or false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path} must be a string")
        return value
    return value


def from_dict(cls, data: dict, path: str = "config"):
    """Build dataclass ``cls`` from a mapping; unknown keys are errors."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown key {path}.{unknown[0]}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigurationError("config file must contain a mapping at the top level")
    return from_dict(ExperimentConfig, data)


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
