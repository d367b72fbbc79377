"""Stochastic policy heads and the state-value critic.

Policies and value functions are immutable: an update produces a new object
via ``with_params``. Differentiable evaluation takes an optional watched
parameter node (``theta``/``phi``); without it the result is a constant node.
Sampling uses plain numpy and a caller-owned ``np.random.Generator``.
"""
from __future__ import annotations

import math
from typing import Union

import numpy as np

from .autodiff import (
    Architecture,
    Layout,
    Node,
    ParamVector,
    ShapeError,
    init_mlp,
    log_softmax,
    mlp_apply,
    mlp_forward,
    mlp_layout,
    param_slice,
)
from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)
GAUSSIAN_ENTROPY_CONST = 0.5 * (LOG_2PI + 1.0)


class GaussianPolicy:
    """Diagonal Gaussian over continuous actions with an MLP mean.

    By default log-sigma is a free parameter vector shared by all
    observations. With ``state_dependent_std`` the network emits
    ``2 * action_dim`` outputs: means followed by log-sigmas.
    """

    kind = "gaussian"

    def __init__(self, arch: Architecture, params: ParamVector, action_dim: int, state_dependent_std: bool = False):
        self.arch = arch
        self.params = params
        self.action_dim = int(action_dim)
        self.state_dependent_std = bool(state_dependent_std)
        width = 2 * self.action_dim if self.state_dependent_std else self.action_dim
        if arch.sizes[-1] != width:
            raise ShapeError(f"output layer width {arch.sizes[-1]} does not match {width}")

    @property
    def obs_dim(self) -> int:
        return self.arch.sizes[0]

    @classmethod
    def create(cls, obs_dim: int, action_dim: int, hidden=(64, 64), rng=None,
               state_dependent_std: bool = False, log_std_init: float = 0.0) -> GaussianPolicy:
        rng = np.random.default_rng(0) if rng is None else rng
        out = 2 * action_dim if state_dependent_std else action_dim
        arch = Architecture((obs_dim, *hidden, out))
        arrays = init_mlp(arch, rng)
        layout = mlp_layout(arch)
        if not state_dependent_std:
            layout = layout + Layout((("log_std", (action_dim,)),))
            arrays["log_std"] = np.full(action_dim, float(log_std_init))
        return cls(arch, ParamVector.from_structured(arrays, layout), action_dim, state_dependent_std)

    def with_params(self, params: ParamVector) -> GaussianPolicy:
        return GaussianPolicy(self.arch, params, self.action_dim, self.state_dependent_std)

    def heads(self, obs, theta=None) -> tuple[Node, Node]:
        """(mean, log_std) as nodes; log_std broadcasts against mean."""
        p = self.params if theta is None else theta
        out = mlp_forward(p, obs, self.arch)
        if self.state_dependent_std:
            n = self.action_dim
            return out[..., :n], out[..., n:]
        log_std = param_slice(p, "log_std")
        return out, log_std if isinstance(log_std, Node) else Node(log_std)

    def heads_np(self, obs) -> tuple[np.ndarray, np.ndarray]:
        out = mlp_apply(self.params, obs, self.arch)
        if self.state_dependent_std:
            n = self.action_dim
            return out[..., :n], out[..., n:]
        return out, np.broadcast_to(self.params.get("log_std"), out.shape)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "arch": self.arch.to_dict(),
            "action_dim": self.action_dim,
            "state_dependent_std": self.state_dependent_std,
            "layout": self.params.layout.to_list(),
            "params": self.params.values.tolist(),
        }


class CategoricalPolicy:
    """Softmax over ``n_actions`` logits produced by an MLP."""

    kind = "categorical"

    def __init__(self, arch: Architecture, params: ParamVector):
        self.arch = arch
        self.params = params
        if self.n_actions < 1:
            raise ShapeError("need at least one action")

    @property
    def n_actions(self) -> int:
        return self.arch.sizes[-1]

    @property
    def obs_dim(self) -> int:
        return self.arch.sizes[0]

    @classmethod
    def create(cls, obs_dim: int, n_actions: int, hidden=(64, 64), rng=None) -> CategoricalPolicy:
        rng = np.random.default_rng(0) if rng is None else rng
        arch = Architecture((obs_dim, *hidden, n_actions))
        return cls(arch, ParamVector.from_structured(init_mlp(arch, rng), mlp_layout(arch)))

    def with_params(self, params: ParamVector) -> CategoricalPolicy:
        return CategoricalPolicy(self.arch, params)

    def logits(self, obs, theta=None) -> Node:
        return mlp_forward(self.params if theta is None else theta, obs, self.arch)

    def logits_np(self, obs) -> np.ndarray:
        return mlp_apply(self.params, obs, self.arch)

    def probabilities(self, obs) -> np.ndarray:
        return softmax(self.logits_np(obs))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "arch": self.arch.to_dict(),
            "layout": self.params.layout.to_list(),
            "params": self.params.values.tolist(),
        }


class ValueFunction:
    """Scalar critic V(o)."""

    kind = "value"

    def __init__(self, arch: Architecture, params: ParamVector):
        if arch.sizes[-1] != 1:
            raise ShapeError(f"value network must end in width 1, got {arch.sizes[-1]}")
        self.arch = arch
        self.params = params

    @property
    def obs_dim(self) -> int:
        return self.arch.sizes[0]

    @classmethod
    def create(cls, obs_dim: int, hidden=(64, 64), rng=None) -> ValueFunction:
        rng = np.random.default_rng(0) if rng is None else rng
        arch = Architecture((obs_dim, *hidden, 1), prefix="critic")
        return cls(arch, ParamVector.from_structured(init_mlp(arch, rng), mlp_layout(arch)))

    def with_params(self, params: ParamVector) -> ValueFunction:
        return ValueFunction(self.arch, params)

    def predict(self, obs) -> np.ndarray:
        """Plain-array values: a float for one observation, a vector for a batch."""
        out = mlp_apply(self.params, obs, self.arch)[..., 0]
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "arch": self.arch.to_dict(),
            "layout": self.params.layout.to_list(),
            "params": self.params.values.tolist(),
        }


Policy = Union[GaussianPolicy, CategoricalPolicy]


def model_from_dict(d: dict):
    arch = Architecture.from_dict(d["arch"])
    params = ParamVector(np.array(d["params"], dtype=np.float64), Layout.from_list(d["layout"]))
    kind = d["kind"]
    if kind == "gaussian":
        return GaussianPolicy(arch, params, d["action_dim"], d["state_dependent_std"])
    if kind == "categorical":
        return CategoricalPolicy(arch, params)
    if kind == "value":
        return ValueFunction(arch, params)
    raise ValueError(f"unknown model kind {kind!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_obs(model, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim not in (1, 2) or obs.shape[-1] != model.obs_dim:
        raise ShapeError(f"observation of shape {obs.shape} does not match input width {model.obs_dim}")
    return obs


def sample_action(policy: Policy, obs, rng: np.random.Generator):
    """Draw one action for one observation; returns (action, log_prob).

    Gaussian actions are returned unsquashed and unclipped.
    """
    obs = _check_obs(policy, obs)
    if isinstance(policy, CategoricalPolicy):
        logits = policy.logits_np(obs)
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("policy network produced non-finite logits")
        logp = logits - np.max(logits)
        logp = logp - math.log(np.exp(logp).sum())
        cdf = np.cumsum(np.exp(logp))
        action = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), policy.n_actions - 1))
        return action, float(logp[action])
    mean, log_std = policy.heads_np(obs)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
        raise FloatingPointError("policy network produced non-finite outputs")
    noise = rng.standard_normal(policy.action_dim)
    action = mean + np.exp(log_std) * noise
    return action, float(_gaussian_logp_np(mean, log_std, action))


def mean_action(policy: Policy, obs):
    """Mode of the action distribution (argmax for categorical)."""
    obs = _check_obs(policy, obs)
    if isinstance(policy, CategoricalPolicy):
        return int(np.argmax(policy.logits_np(obs)))
    return policy.heads_np(obs)[0].copy()


def _gaussian_logp_np(mean, log_std, action) -> np.ndarray:
    z = (action - mean) / np.exp(log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def log_prob_np(policy: Policy, obs, action) -> np.ndarray:
    """Plain-array log-probabilities (same formula as :func:`log_prob`)."""
    obs = _check_obs(policy, obs)
    if isinstance(policy, CategoricalPolicy):
        logits = policy.logits_np(obs)
        z = logits - np.max(logits, axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        idx = _action_index(policy, action, obs)
        return logp[idx] if obs.ndim == 1 else logp[np.arange(len(idx)), idx]
    mean, log_std = policy.heads_np(obs)
    return _gaussian_logp_np(mean, log_std, np.asarray(action, dtype=np.float64))


def _action_index(policy: CategoricalPolicy, action, obs: np.ndarray):
    idx = np.asarray(action)
    if idx.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(idx, 1), 0)):
            raise ValueError(f"categorical action must be an integer index, got {action!r}")
        idx = idx.astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= policy.n_actions):
        raise IndexError(f"action index out of range [0, {policy.n_actions}): {action!r}")
    if obs.ndim == 2 and idx.shape != (obs.shape[0],):
        raise ShapeError(f"expected {obs.shape[0]} action indices, got shape {idx.shape}")
    return int(idx) if obs.ndim == 1 else idx


def log_prob(policy: Policy, obs, action, theta=None) -> Node:
    """log pi(action | obs); one value per observation row."""
    obs = _check_obs(policy, obs)
    if isinstance(policy, CategoricalPolicy):
        idx = _action_index(policy, action, obs)
        logp = log_softmax(policy.logits(obs, theta))
        return logp[idx] if obs.ndim == 1 else logp[np.arange(len(idx)), idx]
    action = np.asarray(action, dtype=np.float64)
    mean, log_std = policy.heads(obs, theta)
    z = (action - mean) / ad.exp(log_std)
    per_dim = z * z * -0.5 - log_std - 0.5 * LOG_2PI
    return per_dim.sum(axis=-1)


def entropy(policy: Policy, obs, theta=None) -> Node:
    """Analytic entropy; one value per observation row."""
    obs = _check_obs(policy, obs)
    if isinstance(policy, CategoricalPolicy):
        logp = log_softmax(policy.logits(obs, theta))
        return -(ad.exp(logp) * logp).sum(axis=-1)
    mean, log_std = policy.heads(obs, theta)
    # broadcast a shared log-sigma against the batch
    log_std = log_std + mean * 0.0
    return (log_std + GAUSSIAN_ENTROPY_CONST).sum(axis=-1)


def value(vf: ValueFunction, obs, phi=None) -> Node:
    """V(o) as a scalar node, or a (batch,) node for stacked observations."""
    obs = _check_obs(vf, obs)
    out = mlp_forward(vf.params if phi is None else phi, obs, vf.arch)
    return out[..., 0]
