"""Environments and the rollout engine.

Every environment decides at a coarser rate than it integrates: one call to
:meth:`Environment.step` holds the action for ``spec.action_repeat`` physics
steps of ``spec.dt_phys`` seconds. Policies emit normalized actions in
[-1, 1]; environments map them affinely onto their physical bounds and clamp.

Episode endings map onto :class:`~pgrl.returns.TerminationKind`:

* time limit      -> BOOTSTRAP (success=False)
* goal reached    -> BOOTSTRAP (success=True)
* failure         -> TRUNCATE
"""
from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .oracle import TabularMDP
from .policy import Policy, ValueFunction, sample_action
from .returns import EpisodeRecord, TerminationKind, TrajectoryBuffer, Transition


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    action_dim: int = 0
    n_actions: int = 0
    action_low: tuple = ()
    action_high: tuple = ()
    dt_phys: float = 0.01
    action_repeat: int = 1
    max_episode_steps: int = 200

    def __post_init__(self):
        if self.action_repeat < 1:
            raise ValueError("action_repeat must be >= 1")
        if not self.dt_phys > 0:
            raise ValueError("physics timestep must be positive")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be >= 1")
        if (self.action_dim > 0) == (self.n_actions > 0):
            raise ValueError("exactly one of action_dim (continuous) or n_actions (discrete) must be set")

    @property
    def discrete(self) -> bool:
        return self.n_actions > 0

    @property
    def decision_dt(self) -> float:
        return self.action_repeat * self.dt_phys


class StepResult(NamedTuple):
    observation: np.ndarray
    reward: float
    termination: TerminationKind
    success: bool = False


class Environment(ABC):
    """reset/step contract plus episode bookkeeping shared by all envs."""

    spec: EnvSpec

    def __init__(self):
        self.rng: np.random.Generator | None = None
        self.needs_reset = True
        self.last_obs: np.ndarray | None = None
        self.episode_counter = -1
        self.episode_step = 0
        self.episode_return = 0.0
        # sticky: the episode achieved its goal at some step
        self.episode_success = False

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Sample s0 from the initial-state distribution, return o(s0)."""
        self.rng = rng
        self._reset_state(rng)
        self.needs_reset = False
        self.episode_counter += 1
        self.episode_step = 0
        self.episode_return = 0.0
        self.episode_success = False
        self.last_obs = self.observe()
        return self.last_obs

    def step(self, action) -> StepResult:
        if self.needs_reset:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        obs, reward, kind, success = apply_action_repeat(self, action, self.spec.action_repeat)
        self.episode_step += 1
        self.episode_return += reward
        self.episode_success = self.episode_success or success or self._goal_reached()
        if kind is TerminationKind.RUNNING and self.episode_step >= self.spec.max_episode_steps:
            kind = TerminationKind.BOOTSTRAP
        if kind.is_terminal:
            self.needs_reset = True
        self.last_obs = obs
        return StepResult(obs, reward, kind, success)

    def scale_action(self, action) -> np.ndarray:
        """Map a normalized action in [-1, 1] onto the physical bounds."""
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        lo = np.asarray(self.spec.action_low, dtype=np.float64)
        hi = np.asarray(self.spec.action_high, dtype=np.float64)
        return lo + (a + 1.0) * 0.5 * (hi - lo)

    def _goal_reached(self) -> bool:
        """Goal achieved without ending the episode (non-terminating tasks)."""
        return False

    @abstractmethod
    def _reset_state(self, rng: np.random.Generator) -> None: ...

    @abstractmethod
    def physics_step(self, action) -> tuple[float, TerminationKind, bool]:
        """Advance one physics step; returns (reward, kind, success)."""

    @abstractmethod
    def observe(self) -> np.ndarray: ...

    # checkpoint support
    def get_state(self) -> dict:
        return {
            "needs_reset": self.needs_reset,
            "last_obs": None if self.last_obs is None else self.last_obs.tolist(),
            "episode_counter": self.episode_counter,
            "episode_step": self.episode_step,
            "episode_return": self.episode_return,
            "episode_success": self.episode_success,
            "physical": self._physical_state(),
        }

    def set_state(self, state: dict, rng: np.random.Generator | None = None) -> None:
        self.needs_reset = bool(state["needs_reset"])
        self.last_obs = None if state["last_obs"] is None else np.array(state["last_obs"], dtype=np.float64)
        self.episode_counter = int(state["episode_counter"])
        self.episode_step = int(state["episode_step"])
        self.episode_return = float(state["episode_return"])
        self.episode_success = bool(state["episode_success"])
        self._set_physical_state(state["physical"])
        if rng is not None:
            self.rng = rng

    @abstractmethod
    def _physical_state(self) -> dict: ...

    @abstractmethod
    def _set_physical_state(self, state: dict) -> None: ...


def apply_action_repeat(env: Environment, action, repeat: int):
    """Hold ``action`` for ``repeat`` physics steps, summing rewards.

    Stops at the first terminal sub-step. Returns
    (observation, summed reward, kind, success).
    """
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    total = 0.0
    kind, success = TerminationKind.RUNNING, False
    for _ in range(repeat):
        reward, kind, success = env.physics_step(action)
        total += reward
        if kind.is_terminal:
            break
    return env.observe(), total, kind, success


# reward shaping and frames ---------------------------------------------------
def dense_goal_reward(x, x_ref, k: float) -> float:
    """exp(-k * |x_ref - x|^2), in (0, 1]."""
    if not k > 0:
        raise ValueError("steepness must be positive")
    d = np.asarray(x_ref, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float(math.exp(-k * float(d @ d)))


def sparse_goal_reward(x, x_ref, eps_goal: float) -> float:
    """1 when |x_ref - x|^2 < eps_goal^2 (strict), else 0."""
    if not eps_goal > 0:
        raise ValueError("goal radius must be positive")
    d = np.asarray(x_ref, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return 1.0 if float(d @ d) < eps_goal * eps_goal else 0.0


def egocentric_transform(goal, position, heading: float) -> np.ndarray:
    """Goal coordinates in the body frame of an agent at ``position`` facing
    ``heading`` radians (counter-clockwise from the world x axis)."""
    d = np.asarray(goal, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    c, s = math.cos(heading), math.sin(heading)
    return np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1]])


# point mass -------------------------------------------------------------------
class PointMassNavEnv(Environment):
    """Planar point mass driven by bounded acceleration toward a goal.

    Explicit Euler with linear drag: x += dt v; v += dt (a - drag v).
    Leaving the square arena truncates with reward 0 on that step.

    Dense mode pays exp(-k d^2) / action_repeat per physics step, so one
    decision earns at most 1. Sparse mode pays 1 on the sub-step that
    enters the goal disk. Entering the disk ends the episode when
    ``terminate_on_goal`` is set (default: sparse only); otherwise the
    episode runs to the time limit and counts as a success if the disk was
    ever entered.

    Observations (world frame): position, velocity, goal. Egocentric frame:
    goal offset and velocity expressed in the body frame. The point mass has
    no orientation of its own, so its heading is fixed at 0 and the body
    frame is the translated world frame.

    The optional curriculum caps the initial agent-goal distance at
    ``curriculum_start`` and widens it linearly to the full arena over the
    first ``curriculum_steps`` decisions taken by this instance.
    """

    def __init__(self, reward_mode: str = "dense", frame: str = "egocentric", arena_half: float = 1.0,
                 goal_radius: float = 0.1, steepness: float = 2.0, max_accel: float = 2.0, drag: float = 1.0,
                 dt_phys: float = 0.01, action_repeat: int = 5, max_episode_steps: int = 200,
                 curriculum_steps: int = 0, curriculum_start: float = 0.3, terminate_on_goal: bool | None = None):
        super().__init__()
        if reward_mode not in ("dense", "sparse"):
            raise ValueError(f"reward_mode must be 'dense' or 'sparse', got {reward_mode!r}")
        if frame not in ("world", "egocentric"):
            raise ValueError(f"frame must be 'world' or 'egocentric', got {frame!r}")
        self.reward_mode = reward_mode
        self.frame = frame
        self.arena_half = float(arena_half)
        self.goal_radius = float(goal_radius)
        self.steepness = float(steepness)
        self.drag = float(drag)
        self.curriculum_steps = int(curriculum_steps)
        self.curriculum_start = float(curriculum_start)
        self.terminate_on_goal = reward_mode == "sparse" if terminate_on_goal is None else bool(terminate_on_goal)
        self.reached = False
        self.spec = EnvSpec(
            obs_dim=6 if frame == "world" else 4,
            action_dim=2,
            action_low=(-max_accel, -max_accel),
            action_high=(max_accel, max_accel),
            dt_phys=dt_phys,
            action_repeat=action_repeat,
            max_episode_steps=max_episode_steps,
        )
        self.position = np.zeros(2)
        self.velocity = np.zeros(2)
        self.goal = np.zeros(2)
        self.decisions_taken = 0

    def initial_distance_cap(self) -> float:
        full = 2.0 * math.sqrt(2.0) * self.arena_half
        if self.curriculum_steps <= 0:
            return full
        frac = min(1.0, self.decisions_taken / self.curriculum_steps)
        return self.curriculum_start + frac * (full - self.curriculum_start)

    def _reset_state(self, rng):
        inner = self.arena_half - self.goal_radius
        self.goal = rng.uniform(-inner, inner, size=2)
        cap = self.initial_distance_cap()
        while True:
            pos = rng.uniform(-self.arena_half, self.arena_half, size=2)
            d = pos - self.goal
            if float(d @ d) < cap * cap:
                break
        self.position = pos
        self.velocity = np.zeros(2)
        self.reached = False

    def _goal_reached(self) -> bool:
        return self.reached

    def step(self, action) -> StepResult:
        self.decisions_taken += 1
        return super().step(action)

    def physics_step(self, action):
        acc = self.scale_action(action)
        dt = self.spec.dt_phys
        self.position = self.position + dt * self.velocity
        self.velocity = self.velocity + dt * (acc - self.drag * self.velocity)
        if np.any(np.abs(self.position) > self.arena_half):
            return 0.0, TerminationKind.TRUNCATE, False
        d = self.goal - self.position
        reached = float(d @ d) < self.goal_radius**2
        if self.reward_mode == "dense":
            # sub-step share, so a full decision earns at most 1
            reward = dense_goal_reward(self.position, self.goal, self.steepness) / self.spec.action_repeat
        else:
            reward = sparse_goal_reward(self.position, self.goal, self.goal_radius)
        if reached:
            self.reached = True
            if self.terminate_on_goal:
                return reward, TerminationKind.BOOTSTRAP, True
        return reward, TerminationKind.RUNNING, False

    def observe(self) -> np.ndarray:
        if self.frame == "world":
            return np.concatenate([self.position, self.velocity, self.goal])
        rel = egocentric_transform(self.goal, self.position, 0.0)
        vel = egocentric_transform(self.velocity, np.zeros(2), 0.0)
        return np.concatenate([rel, vel])

    def _physical_state(self):
        return {
            "position": self.position.tolist(),
            "velocity": self.velocity.tolist(),
            "goal": self.goal.tolist(),
            "decisions_taken": self.decisions_taken,
            "reached": self.reached,
        }

    def _set_physical_state(self, state):
        self.position = np.array(state["position"], dtype=np.float64)
        self.velocity = np.array(state["velocity"], dtype=np.float64)
        self.goal = np.array(state["goal"], dtype=np.float64)
        self.decisions_taken = int(state["decisions_taken"])
        self.reached = bool(state["reached"])


# pendulum -------------------------------------------------------------------------
class PendulumEnv(Environment):
    """Torque-driven pendulum; angle measured from hanging straight down.

    Semi-implicit Euler: w += dt (-(g/l) sin b - damping w + tau/(m l^2)),
    then b += dt w. With zero torque and damping the scheme is symplectic:
    energy oscillates without secular drift. The conserved shadow energy
    differs from E by (dt/2) m l w (g/l) sin b, so the peak-to-peak
    oscillation is at most 2 dt sqrt(g/l) m g l (about 3% of 2 m g l at
    dt = 0.01 s, g/l = 9.81).

    Reward is the dense goal reward between the tip and its upright position.
    ``observability="partial"`` drops the angular velocity.
    """

    def __init__(self, observability: str = "full", max_torque: float = 2.0, gravity: float = 9.81,
                 mass: float = 1.0, length: float = 1.0, damping: float = 0.0, steepness: float = 1.0,
                 dt_phys: float = 0.01, action_repeat: int = 5, max_episode_steps: int = 200):
        super().__init__()
        if observability not in ("full", "partial"):
            raise ValueError(f"observability must be 'full' or 'partial', got {observability!r}")
        self.observability = observability
        self.gravity, self.mass, self.length = float(gravity), float(mass), float(length)
        self.damping = float(damping)
        self.steepness = float(steepness)
        self.spec = EnvSpec(
            obs_dim=3 if observability == "full" else 2,
            action_dim=1,
            action_low=(-max_torque,),
            action_high=(max_torque,),
            dt_phys=dt_phys,
            action_repeat=action_repeat,
            max_episode_steps=max_episode_steps,
        )
        self.angle = 0.0
        self.angular_velocity = 0.0

    def _reset_state(self, rng):
        self.angle = float(rng.uniform(-math.pi, math.pi))
        self.angular_velocity = float(rng.uniform(-1.0, 1.0))

    def tip(self) -> np.ndarray:
        return self.length * np.array([math.sin(self.angle), -math.cos(self.angle)])

    def energy(self) -> float:
        m, l = self.mass, self.length
        return 0.5 * m * l * l * self.angular_velocity**2 - m * self.gravity * l * math.cos(self.angle)

    def physics_step(self, action):
        torque = float(self.scale_action(action)[0])
        dt = self.spec.dt_phys
        m, l = self.mass, self.length
        alpha = -(self.gravity / l) * math.sin(self.angle) - self.damping * self.angular_velocity + torque / (m * l * l)
        self.angular_velocity += dt * alpha
        self.angle += dt * self.angular_velocity
        reward = dense_goal_reward(self.tip(), (0.0, self.length), self.steepness)
        return reward, TerminationKind.RUNNING, False

    def observe(self) -> np.ndarray:
        base = [math.sin(self.angle), math.cos(self.angle)]
        if self.observability == "full":
            base.append(self.angular_velocity)
        return np.array(base)

    def _physical_state(self):
        return {"angle": self.angle, "angular_velocity": self.angular_velocity}

    def _set_physical_state(self, state):
        self.angle = float(state["angle"])
        self.angular_velocity = float(state["angular_velocity"])


# tabular ----------------------------------------------------------------------------
class ChainMDPEnv(Environment):
    """A :class:`TabularMDP` behind the environment interface.

    Observations are one-hot state vectors; actions are integer indices;
    the reward is r(s, a, s'). Episodes end only on the time limit.
    """

    def __init__(self, mdp: TabularMDP, max_episode_steps: int = 100):
        super().__init__()
        self.mdp = mdp
        self.spec = EnvSpec(obs_dim=mdp.n_states, n_actions=mdp.n_actions, dt_phys=1.0,
                            action_repeat=1, max_episode_steps=max_episode_steps)
        self.state = 0
        self._cdf = np.cumsum(mdp.P, axis=-1)
        self._cdf0 = np.cumsum(mdp.rho0)

    @classmethod
    def chain(cls, n_states: int = 5, slip: float = 0.1, gamma: float = 0.9, max_episode_steps: int = 100):
        return cls(TabularMDP.chain(n_states, slip, gamma), max_episode_steps)

    def _draw(self, cdf: np.ndarray, u: float) -> int:
        return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(cdf) - 1))

    def _reset_state(self, rng):
        self.state = self._draw(self._cdf0, rng.random())

    def physics_step(self, action):
        a = int(action)
        if not 0 <= a < self.mdp.n_actions:
            raise IndexError(f"action {a} out of range")
        s = self.state
        s_next = self._draw(self._cdf[s, a], self.rng.random())
        self.state = s_next
        return float(self.mdp.R[s, a, s_next]), TerminationKind.RUNNING, False

    def observe(self) -> np.ndarray:
        o = np.zeros(self.mdp.n_states)
        o[self.state] = 1.0
        return o

    def _physical_state(self):
        return {"state": self.state}

    def _set_physical_state(self, state):
        self.state = int(state["state"])


# rollout ------------------------------------------------------------------------------
class RolloutError(RuntimeError):
    pass


def rollout(env: Environment, policy: Policy, vf: ValueFunction | None, buffer: TrajectoryBuffer, N: int,
            rng: np.random.Generator, worker: tuple[int, int] = (0, 1)) -> TrajectoryBuffer:
    """Append ``N`` transitions collected with ``policy`` to ``buffer``.

    Episodes persist across calls: an unfinished episode continues on the
    next call. When collection stops mid-episode the current observation is
    cached in ``buffer.bootstrap_obs`` (and its value in
    ``buffer.bootstrap_values`` when ``vf`` is given). Episode ids are
    ``counter * n_workers + worker_index`` so workers never collide.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    index, count = worker
    for _ in range(N):
        if env.needs_reset:
            env.reset(rng)
        obs = env.last_obs
        eid = env.episode_counter * count + index
        step_index = env.episode_step
        action, logp = sample_action(policy, obs, rng)
        res = env.step(action)
        if not (np.all(np.isfinite(res.observation)) and math.isfinite(res.reward)):
            raise RolloutError(
                f"non-finite observation or reward in episode {eid} at step {step_index}: "
                f"obs={res.observation!r}, reward={res.reward!r}"
            )
        terminal = res.termination.is_terminal
        buffer.append(Transition(
            obs=obs,
            action=action,
            reward=res.reward,
            logp_old=logp,
            termination=res.termination,
            episode_id=eid,
            step=step_index,
            success=res.success,
            final_obs=res.observation if terminal else None,
        ))
        if terminal:
            buffer.episodes.append(EpisodeRecord(eid, env.episode_return, env.episode_step, env.episode_success,
                                                 res.termination))
    if not env.needs_reset:
        eid = env.episode_counter * count + index
        buffer.bootstrap_obs[eid] = env.last_obs
        if vf is not None:
            buffer.bootstrap_values[eid] = vf.predict(env.last_obs)
    return buffer


def make_env(name: str, **params) -> Environment:
    """Construct an environment by registry name."""
    if name == "point_mass":
        return PointMassNavEnv(**params)
    if name == "pendulum":
        return PendulumEnv(**params)
    if name == "chain":
        mdp_path = params.pop("mdp", None)
        if mdp_path is not None:
            return ChainMDPEnv(TabularMDP.load(mdp_path), **params)
        return ChainMDPEnv.chain(**params)
    raise ValueError(f"unknown environment {name!r}; expected point_mass, pendulum or chain")
