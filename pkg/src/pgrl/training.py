"""Training loop, metrics CSV, checkpoints and evaluation.

Seeding rule: ``SeedSequence(seed).spawn(1 + workers)``. Child 0 initializes
the networks; child ``1 + i`` drives worker ``i`` (environment resets,
transitions and action sampling). Workers run in index order inside one
process, so a single-worker run is a pure function of its config.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import deque
from pathlib import Path

import numpy as np

from .algos import Agent, NonFiniteLossError, actor_critic_update, ppo_update, reinforce_update
from .autodiff import OptimizerState
from .config import RunConfig, parse_config
from .envs import Environment, RolloutError, make_env, rollout
from .policy import CategoricalPolicy, GaussianPolicy, ValueFunction, mean_action, model_from_dict, sample_action
from .returns import TrajectoryBuffer

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRICS_TAG = f"# pgrl-metrics v{METRICS_VERSION}"
METRICS_COLUMNS = (
    "update", "step", "episodes", "mean_return", "success_rate",
    "policy_loss", "value_loss", "entropy", "mean_ratio", "clip_fraction", "approx_kl", "grad_norm",
)
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Training stopped; the last good state was checkpointed."""


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_metrics_header(path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_TAG + "\n")
        fh.write(",".join(METRICS_COLUMNS) + "\n")


def append_metrics_row(path, row: dict) -> None:
    with open(path, "a", newline="") as fh:
        fh.write(",".join(_fmt(row[c]) for c in METRICS_COLUMNS) + "\n")


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV; raises ValueError naming the first bad line."""
    rows = []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if len(lines) < 2 or lines[0] != METRICS_TAG:
        raise ValueError(f"{path}: line 1: expected {METRICS_TAG!r}")
    if lines[1] != ",".join(METRICS_COLUMNS):
        raise ValueError(f"{path}: line 2: unexpected header {lines[1]!r}")
    for lineno, fields in enumerate(csv.reader(lines[2:]), start=3):
        if len(fields) != len(METRICS_COLUMNS):
            raise ValueError(f"{path}: line {lineno}: expected {len(METRICS_COLUMNS)} fields, got {len(fields)}")
        try:
            row = {c: float(v) for c, v in zip(METRICS_COLUMNS, fields)}
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: non-numeric field") from None
        rows.append(row)
    return rows


def _truncate_metrics(path, n_rows: int) -> None:
    lines = Path(path).read_text().splitlines(keepends=True)
    Path(path).write_text("".join(lines[: 2 + n_rows]))


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dumps_checkpoint(state: dict) -> str:
    return json.dumps(state, indent=1, sort_keys=True) + "\n"


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        state = json.load(fh)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {state.get('format_version')!r}")
    return state


def build_env(config: RunConfig) -> Environment:
    return make_env(config.env.name, **config.env.env_kwargs())


def build_agent(config: RunConfig, env: Environment, rng: np.random.Generator) -> Agent:
    net = config.network
    hidden = tuple(net.hidden)
    spec = env.spec
    if spec.discrete:
        policy = CategoricalPolicy.create(spec.obs_dim, spec.n_actions, hidden, rng)
    else:
        policy = GaussianPolicy.create(spec.obs_dim, spec.action_dim, hidden, rng,
                                       state_dependent_std=net.state_dependent_std, log_std_init=net.log_std_init)
    vf = None if config.algo.name == "reinforce" else ValueFunction.create(spec.obs_dim, hidden, rng)
    return Agent.create(policy, vf, config.algo.lr)


def _shares(total: int, workers: int) -> list[int]:
    base, extra = divmod(total, workers)
    return [base + (1 if i < extra else 0) for i in range(workers)]


class Trainer:
    """Owns environments, random streams, the agent and run bookkeeping."""

    def __init__(self, config: RunConfig):
        self.config = config
        children = np.random.SeedSequence(config.seed).spawn(1 + config.workers)
        self.envs = [build_env(config) for _ in range(config.workers)]
        self.agent = build_agent(config, self.envs[0], np.random.default_rng(children[0]))
        self.rngs = [np.random.default_rng(c) for c in children[1:]]
        self.global_step = 0
        self.update = 0
        self.episodes = 0
        self.window: deque = deque(maxlen=config.success_window)

    # persistence ----------------------------------------------------------------
    def state_dict(self) -> dict:
        a = self.agent
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "policy": a.policy.to_dict(),
            "value": None if a.vf is None else a.vf.to_dict(),
            "policy_opt": a.policy_opt.to_dict(),
            "value_opt": None if a.value_opt is None else a.value_opt.to_dict(),
            "global_step": self.global_step,
            "update": self.update,
            "episodes": self.episodes,
            "window": [[r, s] for r, s in self.window],
            "rng": [r.bit_generator.state for r in self.rngs],
            "envs": [e.get_state() for e in self.envs],
        }

    @classmethod
    def from_state(cls, state: dict) -> Trainer:
        t = cls(parse_config(state["config"]))
        t.agent = Agent(
            model_from_dict(state["policy"]),
            None if state["value"] is None else model_from_dict(state["value"]),
            OptimizerState.from_dict(state["policy_opt"]),
            None if state["value_opt"] is None else OptimizerState.from_dict(state["value_opt"]),
        )
        t.global_step = int(state["global_step"])
        t.update = int(state["update"])
        t.episodes = int(state["episodes"])
        t.window.extend((float(r), bool(s)) for r, s in state["window"])
        if len(state["rng"]) != len(t.rngs):
            raise ValueError("checkpoint worker count does not match its config")
        for rng, s in zip(t.rngs, state["rng"]):
            rng.bit_generator.state = s
        for env, rng, s in zip(t.envs, t.rngs, state["envs"]):
            env.set_state(s, rng)
        return t

    def save(self, path=None) -> None:
        _atomic_write(path or self.config.checkpoint_path, dumps_checkpoint(self.state_dict()))

    # loop ------------------------------------------------------------------------
    def _collect(self, n: int) -> TrajectoryBuffer:
        cfg = self.config
        buf = TrajectoryBuffer(None, cfg.algo.gamma)
        count = cfg.workers
        for i, (env, rng, share) in enumerate(zip(self.envs, self.rngs, _shares(n, count))):
            if share > 0:
                rollout(env, self.agent.policy, self.agent.vf, buf, share, rng, (i, count))
            if cfg.algo.name == "reinforce":
                # REINFORCE only learns from complete episodes
                while not env.needs_reset:
                    rollout(env, self.agent.policy, None, buf, 1, rng, (i, count))
        return buf

    def _update(self, buf: TrajectoryBuffer):
        algo = self.config.algo
        if algo.name == "reinforce":
            return reinforce_update(buf, self.agent, algo.gamma, algo.lr)
        if algo.name == "a2c":
            return actor_critic_update(buf, self.agent, algo.ppo_config())
        reports = ppo_update(buf, self.agent, algo.ppo_config())
        first, last = reports[0], reports[-1]
        first.clip_fraction, first.approx_kl = last.clip_fraction, last.approx_kl
        first.grad_norm = float(np.mean([r.grad_norm for r in reports]))
        return first

    def _row(self, report) -> dict:
        returns = [r for r, _ in self.window]
        return {
            "update": self.update,
            "step": self.global_step,
            "episodes": self.episodes,
            "mean_return": float(np.mean(returns)) if returns else float("nan"),
            "success_rate": self.success_rate(),
            **{k: float(v) for k, v in report.as_dict().items()},
        }

    def success_rate(self) -> float:
        return float(np.mean([s for _, s in self.window])) if self.window else float("nan")

    def _dump(self, buf: TrajectoryBuffer) -> None:
        with open(self.config.trajectory_dump, "a") as fh:
            for tr in buf:
                fh.write(json.dumps(tr.to_json(), sort_keys=True) + "\n")

    def train(self, resume: bool = False) -> None:
        """Run updates until the step budget is spent.

        Writes one metrics row per update and checkpoints every
        ``checkpoint_interval`` updates plus at the start and end. On a
        non-finite loss or rollout the last good state is saved and
        :class:`TrainingError` is raised.
        """
        cfg = self.config
        metrics = cfg.metrics_path
        if resume and Path(metrics).exists():
            _truncate_metrics(metrics, self.update)
        else:
            write_metrics_header(metrics)
            if cfg.trajectory_dump:
                Path(cfg.trajectory_dump).write_text("")
        if not resume:
            self.save()
        while self.global_step < cfg.total_steps:
            good = self.state_dict()
            n = min(cfg.algo.horizon, cfg.total_steps - self.global_step)
            try:
                buf = self._collect(n)
                report = self._update(buf)
            except (NonFiniteLossError, FloatingPointError, RolloutError) as exc:
                _atomic_write(cfg.checkpoint_path, dumps_checkpoint(good))
                raise TrainingError(f"update {self.update + 1}: {exc}; last good state saved to "
                                    f"{cfg.checkpoint_path}") from exc
            if cfg.trajectory_dump:
                self._dump(buf)
            self.global_step += len(buf)
            self.update += 1
            for ep in buf.episodes:
                self.episodes += 1
                self.window.append((float(ep.total_reward), bool(ep.success)))
            row = self._row(report)
            append_metrics_row(metrics, row)
            log.info("update %d step %d return %.3f success %.2f", self.update, self.global_step,
                     row["mean_return"], row["success_rate"])
            if cfg.checkpoint_interval and self.update % cfg.checkpoint_interval == 0:
                self.save()
        self.save()


def evaluate(state: dict, episodes: int, deterministic: bool = False, seed: int | None = None) -> dict:
    """Fresh-environment rollouts of a checkpointed policy.

    Uses its own stream (``seed`` or the run seed) so training streams are
    untouched. Returns mean/sd undiscounted return and success rate.
    """
    if episodes < 0:
        raise ValueError("episodes must be nonnegative")
    config = parse_config(state["config"])
    policy = model_from_dict(state["policy"])
    env = build_env(config)
    if env.spec.obs_dim != policy.obs_dim:
        raise ValueError(f"checkpoint policy expects {policy.obs_dim}-d observations, "
                         f"environment {config.env.name!r} emits {env.spec.obs_dim}")
    if env.spec.discrete != isinstance(policy, CategoricalPolicy):
        raise ValueError("checkpoint policy and environment disagree on discrete vs continuous actions")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed if seed is None else seed).spawn(2)[1])
    returns, successes, lengths = [], [], []
    for _ in range(episodes):
        obs = env.reset(rng)
        while True:
            action = mean_action(policy, obs) if deterministic else sample_action(policy, obs, rng)[0]
            res = env.step(action)
            obs = res.observation
            if res.termination.is_terminal:
                break
        returns.append(env.episode_return)
        successes.append(bool(env.episode_success))
        lengths.append(env.episode_step)
    summary = {
        "episodes": episodes,
        "deterministic": deterministic,
        "mean_return": float(np.mean(returns)) if returns else None,
        "std_return": float(np.std(returns)) if returns else None,
        "success_rate": float(np.mean(successes)) if returns else None,
        "mean_length": float(np.mean(lengths)) if returns else None,
    }
    if returns and not all(math.isfinite(r) for r in returns):
        raise FloatingPointError("non-finite episode return during evaluation")
    return summary
