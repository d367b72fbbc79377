"""Run configuration: a YAML document validated with pydantic.

Every key is explicit; unknown keys are rejected at load time, before any
computation starts. Defaults below are the documented defaults table.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .algos import PPOConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PointMassParams(_Strict):
    reward_mode: Literal["dense", "sparse"] = "dense"
    frame: Literal["world", "egocentric"] = "egocentric"
    arena_half: float = Field(1.0, gt=0)
    goal_radius: float = Field(0.1, gt=0)
    steepness: float = Field(2.0, gt=0)
    max_accel: float = Field(2.0, gt=0)
    drag: float = Field(1.0, ge=0)
    dt_phys: float = Field(0.01, gt=0)
    action_repeat: int = Field(5, ge=1)
    max_episode_steps: int = Field(200, ge=1)
    curriculum_steps: int = Field(0, ge=0)
    curriculum_start: float = Field(0.3, gt=0)
    # None: sparse episodes end at the goal, dense ones run to the time limit
    terminate_on_goal: Optional[bool] = None


class PendulumParams(_Strict):
    observability: Literal["full", "partial"] = "full"
    max_torque: float = Field(2.0, gt=0)
    gravity: float = Field(9.81, gt=0)
    mass: float = Field(1.0, gt=0)
    length: float = Field(1.0, gt=0)
    damping: float = Field(0.0, ge=0)
    steepness: float = Field(1.0, gt=0)
    dt_phys: float = Field(0.01, gt=0)
    action_repeat: int = Field(5, ge=1)
    max_episode_steps: int = Field(200, ge=1)


class ChainParams(_Strict):
    # path to a TabularMDP JSON file or a shipped instance name
    mdp: Optional[str] = None
    n_states: int = Field(5, ge=2)
    slip: float = Field(0.1, ge=0, le=1)
    gamma: float = Field(0.9, ge=0, lt=1)
    max_episode_steps: int = Field(100, ge=1)

    def env_kwargs(self) -> dict:
        if self.mdp is not None:
            return {"mdp": self.mdp, "max_episode_steps": self.max_episode_steps}
        return {"n_states": self.n_states, "slip": self.slip, "gamma": self.gamma,
                "max_episode_steps": self.max_episode_steps}


_ENV_PARAMS = {"point_mass": PointMassParams, "pendulum": PendulumParams, "chain": ChainParams}


class EnvConfig(_Strict):
    name: Literal["point_mass", "pendulum", "chain"] = "point_mass"
    params: Union[PointMassParams, PendulumParams, ChainParams, dict] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def _typed_params(cls, data):
        if isinstance(data, dict):
            name = data.get("name", "point_mass")
            params = data.get("params") or {}
            model = _ENV_PARAMS.get(name)
            if model is not None and isinstance(params, dict):
                try:
                    data = {**data, "params": model.model_validate(params)}
                except ValidationError as exc:
                    # keep the "params" segment in error locations
                    details = [{"type": e["type"], "loc": ("params", *e["loc"]), "input": e["input"],
                                **({"ctx": e["ctx"]} if "ctx" in e else {})} for e in exc.errors()]
                    raise ValidationError.from_exception_data(cls.__name__, details) from None
        return data

    def env_kwargs(self) -> dict:
        if isinstance(self.params, ChainParams):
            return self.params.env_kwargs()
        return self.params.model_dump()


class AlgoConfig(_Strict):
    name: Literal["reinforce", "a2c", "ppo"] = "ppo"
    clip_eps: float = Field(0.2, gt=0, lt=1)
    entropy_coef: float = Field(0.01, ge=0)
    epochs: int = Field(10, ge=1)
    horizon: int = Field(2048, ge=1)
    gamma: float = Field(0.99, ge=0, lt=1)
    lr: float = Field(3e-4, gt=0)
    normalize_advantages: bool = True
    value_target_k: Optional[int] = Field(None, ge=1)
    success_bootstrap: bool = False
    freeze_bootstrap: bool = False
    target_kl: Optional[float] = Field(None, gt=0)
    discount_weighting: bool = False

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(**self.model_dump(exclude={"name"}))


class NetworkConfig(_Strict):
    hidden: list[int] = Field(default_factory=lambda: [64, 64])
    state_dependent_std: bool = False
    log_std_init: float = 0.0

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if any(w < 1 for w in v):
            raise ValueError("hidden widths must be positive")
        return v


class RunConfig(_Strict):
    env: EnvConfig = Field(default_factory=EnvConfig)
    algo: AlgoConfig = Field(default_factory=AlgoConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    seed: int = Field(0, ge=0, lt=2**64)
    total_steps: int = Field(200_000, ge=0)
    workers: int = Field(1, ge=1)
    metrics_path: str = "metrics.csv"
    checkpoint_path: str = "checkpoint.json"
    # in updates; 0 writes only the initial and final checkpoints
    checkpoint_interval: int = Field(10, ge=0)
    success_window: int = Field(100, ge=1)
    trajectory_dump: Optional[str] = None

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


class ConfigError(ValueError):
    pass


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"] if not str(p).endswith("Params"))
            lines.append(f"{loc or '<root>'}: {err['msg']}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from None


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)
