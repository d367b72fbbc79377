"""REINFORCE, advantage actor-critic and clipped PPO updates.

Policies and critics are immutable snapshots; an :class:`Agent` holds the
current snapshots plus optimizer state and each update swaps them in place.
Policy updates are written as descent on a loss: the score-function
surrogate ``-mean(w * log pi)`` has gradient ``-mean(w * grad log pi)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, OptimizerState, ParamVector, Tape, adam_step, backward
from .policy import Policy, ValueFunction, entropy, log_prob, value
from .returns import (
    TrajectoryBuffer,
    bootstrap_targets,
    buffer_targets,
    discounted_returns,
    next_values,
    normalize_advantages,
    tail_observations,
    value_loss,
)


class NonFiniteLossError(FloatingPointError):
    """Raised after an update was abandoned and parameters rolled back."""


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    epochs: int = 10
    horizon: int = 2048
    gamma: float = 0.99
    lr: float = 3e-4
    normalize_advantages: bool = True
    # K-step window for Q-hat / V-hat targets; None runs to the segment end
    value_target_k: int | None = None
    success_bootstrap: bool = False
    freeze_bootstrap: bool = False
    target_kl: float | None = None
    # weight score terms by gamma^t (t = step within episode)
    discount_weighting: bool = False

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be nonnegative")
        if self.epochs < 1 or self.horizon < 1:
            raise ValueError("epochs and horizon must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.value_target_k is not None and self.value_target_k < 1:
            raise ValueError("value_target_k must be >= 1")


@dataclass
class UpdateReport:
    policy_loss: float
    value_loss: float
    entropy: float
    mean_ratio: float
    clip_fraction: float
    approx_kl: float
    grad_norm: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Agent:
    policy: Policy
    vf: ValueFunction | None = None
    policy_opt: OptimizerState | None = None
    value_opt: OptimizerState | None = None

    @classmethod
    def create(cls, policy: Policy, vf: ValueFunction | None = None, lr: float = 3e-4) -> Agent:
        return cls(
            policy,
            vf,
            OptimizerState.zeros(len(policy.params), lr=lr),
            None if vf is None else OptimizerState.zeros(len(vf.params), lr=lr),
        )

    def snapshot(self) -> Agent:
        copy = lambda o: None if o is None else OptimizerState.from_dict(o.to_dict())  # noqa: E731
        return Agent(self.policy, self.vf, copy(self.policy_opt), copy(self.value_opt))

    def restore(self, snap: Agent) -> None:
        self.policy, self.vf = snap.policy, snap.vf
        self.policy_opt, self.value_opt = snap.policy_opt, snap.value_opt


# building blocks ------------------------------------------------------------------
def compute_ratio(logp_new: Node, logp_old) -> Node:
    """exp(logp_new - logp_old); differentiable through logp_new only."""
    old = np.asarray(logp_old, dtype=np.float64)
    if not (np.all(np.isfinite(logp_new.value)) and np.all(np.isfinite(old))):
        raise FloatingPointError("non-finite log-probabilities in ratio")
    return ad.exp(logp_new - old)


def clipped_surrogate(ratio, adv, eps: float) -> Node:
    """mean(min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A))."""
    if isinstance(ratio, (list, tuple)):
        ratio = ad.concatenate([r.reshape(1) for r in ratio])
    adv = np.asarray(adv, dtype=np.float64)
    if ratio.shape != adv.shape:
        raise ValueError(f"length mismatch: ratio {ratio.shape} vs advantages {adv.shape}")
    unclipped = ratio * adv
    clipped = ad.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    return ad.minimum(unclipped, clipped).mean()


def score_gradient(policy: Policy, obs, actions, weights, denom: float) -> tuple[ParamVector, Node, Tape]:
    """(1/denom) sum_i w_i grad log pi(a_i|o_i) via one backward sweep."""
    tape = Tape()
    theta = tape.watch(policy.params)
    lp = log_prob(policy, obs, actions, theta)
    objective = (lp * np.asarray(weights, dtype=np.float64)).sum() / float(denom)
    return backward(objective, theta), objective, tape


def _complete_episodes(buffer: TrajectoryBuffer) -> list[tuple[int, int]]:
    return [(a, b) for a, b in buffer.segments() if buffer[b - 1].termination.is_terminal]


def reinforce_weights(buffer: TrajectoryBuffer, gamma: float) -> tuple[np.ndarray, np.ndarray, int]:
    """gamma^t R_t for transitions of complete episodes.

    Returns (indices, weights, number of episodes).
    """
    episodes = _complete_episodes(buffer)
    if not episodes:
        raise ValueError("REINFORCE needs at least one complete episode in the buffer")
    idx, w = [], []
    rewards = buffer.rewards()
    for a, b in episodes:
        R = discounted_returns(rewards[a:b], gamma)
        steps = np.array([buffer[i].step for i in range(a, b)])
        idx.extend(range(a, b))
        w.extend(gamma**steps * R)
    return np.array(idx), np.array(w), len(episodes)


def reinforce_gradient(buffer: TrajectoryBuffer, policy: Policy, gamma: float) -> ParamVector:
    """Monte-Carlo estimate (1/M) sum_j sum_t gamma^t R_t grad log pi."""
    idx, w, m = reinforce_weights(buffer, gamma)
    obs = buffer.observations()[idx]
    actions = buffer.actions()[idx]
    return score_gradient(policy, obs, actions, w, m)[0]


def _mean_entropy(policy: Policy, obs) -> float:
    return float(np.mean(entropy(policy, obs).value))


def reinforce_update(buffer: TrajectoryBuffer, agent: Agent, gamma: float, lr: float) -> UpdateReport:
    """One plain gradient-ascent step theta += lr * grad J on complete episodes."""
    idx, w, m = reinforce_weights(buffer, gamma)
    obs = buffer.observations()[idx]
    actions = buffer.actions()[idx]
    grad, objective, _ = score_gradient(agent.policy, obs, actions, w, m)
    if not np.all(np.isfinite(grad.values)):
        raise NonFiniteLossError("non-finite REINFORCE gradient; parameters unchanged")
    agent.policy = agent.policy.with_params(agent.policy.params.replace(agent.policy.params.values + lr * grad.values))
    return UpdateReport(
        policy_loss=-objective.item(),
        value_loss=0.0,
        entropy=_mean_entropy(agent.policy, obs),
        mean_ratio=1.0,
        clip_fraction=0.0,
        approx_kl=0.0,
        grad_norm=float(np.linalg.norm(grad.values)),
    )


def _targets_and_values(buffer: TrajectoryBuffer, vf: ValueFunction, config: PPOConfig, obs: np.ndarray,
                        frozen_tail: dict | None = None):
    obs_values = np.asarray(vf.predict(obs), dtype=np.float64)
    targets, _, tails = buffer_targets(buffer, vf, config.value_target_k, config.success_bootstrap,
                                       obs_values=obs_values, tail_values=frozen_tail)
    return targets, obs_values, tails


def _advantages(targets, obs_values, config: PPOConfig, buffer: TrajectoryBuffer) -> np.ndarray:
    adv = targets - obs_values
    if config.normalize_advantages and len(adv) >= 2:
        adv = normalize_advantages(adv)
    if config.discount_weighting:
        steps = np.array([t.step for t in buffer])
        adv = adv * config.gamma**steps
    return adv


def actor_critic_update(buffer: TrajectoryBuffer, agent: Agent, config: PPOConfig) -> UpdateReport:
    """Advantage-weighted score step on the actor, value-loss step on the critic.

    Q-hat uses the K-step bootstrap with the current critic; advantages are
    constants. Both steps use Adam.
    """
    if len(buffer) == 0:
        raise ValueError("empty buffer")
    if agent.vf is None:
        raise ValueError("actor-critic needs a value function")
    obs = buffer.observations()
    actions = buffer.actions()
    targets, obs_values, _ = _targets_and_values(buffer, agent.vf, config, obs)
    adv = _advantages(targets, obs_values, config, buffer)

    tape = Tape()
    theta = tape.watch(agent.policy.params)
    phi = tape.watch(agent.vf.params)
    lp = log_prob(agent.policy, obs, actions, theta)
    policy_loss = -(lp * adv).mean()
    vloss = value_loss(value(agent.vf, obs, phi), targets)
    total = policy_loss + vloss
    if not math.isfinite(total.item()):
        raise NonFiniteLossError("non-finite actor-critic loss; parameters unchanged")
    g_theta, g_phi = backward(total, (theta, phi))
    new_theta, popt = adam_step(agent.policy.params, g_theta, agent.policy_opt)
    new_phi, vopt = adam_step(agent.vf.params, g_phi, agent.value_opt)
    agent.policy, agent.policy_opt = agent.policy.with_params(new_theta), popt
    agent.vf, agent.value_opt = agent.vf.with_params(new_phi), vopt
    return UpdateReport(
        policy_loss=policy_loss.item(),
        value_loss=vloss.item(),
        entropy=_mean_entropy(agent.policy, obs),
        mean_ratio=1.0,
        clip_fraction=0.0,
        approx_kl=0.0,
        grad_norm=ad.flat_norm((g_theta, g_phi)),
    )


def ppo_update(buffer: TrajectoryBuffer, agent: Agent, config: PPOConfig) -> list[UpdateReport]:
    """``config.epochs`` full-batch Adam steps on the clipped PPO loss.

    Each epoch recomputes targets and advantages with the current critic;
    ``logp_old`` always comes from the buffer (the pre-update policy). On a
    non-finite loss or gradient the agent is restored to its pre-update
    state and :class:`NonFiniteLossError` is raised.
    """
    if len(buffer) == 0:
        raise ValueError("empty buffer")
    if agent.vf is None:
        raise ValueError("PPO needs a value function")
    snap = agent.snapshot()
    obs = buffer.observations()
    actions = buffer.actions()
    logp_old = buffer.logp_old()
    eps, alpha = config.clip_eps, config.entropy_coef
    frozen_tail = None
    reports = []
    try:
        for epoch in range(config.epochs):
            targets, obs_values, tails = _targets_and_values(buffer, agent.vf, config, obs, frozen_tail)
            if config.freeze_bootstrap and frozen_tail is None:
                frozen_tail = tails
            adv = _advantages(targets, obs_values, config, buffer)

            tape = Tape()
            theta = tape.watch(agent.policy.params)
            phi = tape.watch(agent.vf.params)
            lp = log_prob(agent.policy, obs, actions, theta)
            ratio = compute_ratio(lp, logp_old)
            l_clip = clipped_surrogate(ratio, adv, eps)
            l_value = value_loss(value(agent.vf, obs, phi), targets)
            ent = entropy(agent.policy, obs, theta).mean()
            total = -l_clip + l_value - alpha * ent
            if not math.isfinite(total.item()):
                raise NonFiniteLossError(f"non-finite PPO loss at epoch {epoch}")
            g_theta, g_phi = backward(total, (theta, phi))
            if not (np.all(np.isfinite(g_theta.values)) and np.all(np.isfinite(g_phi.values))):
                raise NonFiniteLossError(f"non-finite PPO gradient at epoch {epoch}")
            new_theta, popt = adam_step(agent.policy.params, g_theta, agent.policy_opt)
            new_phi, vopt = adam_step(agent.vf.params, g_phi, agent.value_opt)

            r = ratio.value
            report = UpdateReport(
                policy_loss=-l_clip.item(),
                value_loss=l_value.item(),
                entropy=ent.item(),
                mean_ratio=float(r.mean()),
                clip_fraction=float(np.mean((r < 1.0 - eps) | (r > 1.0 + eps))),
                approx_kl=float(np.mean(logp_old - lp.value)),
                grad_norm=ad.flat_norm((g_theta, g_phi)),
            )
            reports.append(report)
            agent.policy, agent.policy_opt = agent.policy.with_params(new_theta), popt
            agent.vf, agent.value_opt = agent.vf.with_params(new_phi), vopt
            if config.target_kl is not None and report.approx_kl > config.target_kl:
                break
    except (NonFiniteLossError, FloatingPointError) as exc:
        agent.restore(snap)
        if isinstance(exc, NonFiniteLossError):
            raise
        raise NonFiniteLossError(str(exc)) from exc
    return reports


def fit_value_function(buffer: TrajectoryBuffer, vf: ValueFunction, opt: OptimizerState, iterations: int,
                       K: int = 1, success_bootstrap: bool = False) -> tuple[ValueFunction, OptimizerState, float]:
    """Repeated K-step bootstrapped regression of the critic on a fixed buffer.

    Targets are refreshed with the current critic before every step.
    Returns the fitted critic, optimizer state and final loss.
    """
    obs = buffer.observations()
    rewards = buffer.rewards()
    segments = buffer.segments()
    lasts, tails = tail_observations(buffer, segments, success_bootstrap)
    lasts = np.asarray(lasts, dtype=np.int64)
    tail_obs = np.stack(tails) if tails else None
    segments = np.asarray(segments, dtype=np.int64).reshape(-1, 2)
    loss = float("nan")
    for _ in range(iterations):
        tape = Tape()
        phi = tape.watch(vf.params)
        pred = value(vf, obs, phi)
        tail_values = {} if tail_obs is None else (lasts, np.atleast_1d(vf.predict(tail_obs)))
        nxt = next_values(buffer, np.atleast_1d(pred.value), tail_values, segments)
        targets = bootstrap_targets(rewards, nxt, segments, buffer.gamma, K)
        l = value_loss(pred, targets)
        grad = backward(l, phi)
        new, opt = adam_step(vf.params, grad, opt)
        vf = vf.with_params(new)
        loss = l.item()
    return vf, opt, loss
