"""Exact policy evaluation and policy gradients on small tabular MDPs.

Two modes throughout:

* infinite horizon (``horizon=None``): linear solves with discount < 1;
* finite horizon ``T``: backward induction over steps-to-go, and exhaustive
  trajectory enumeration for the score-function identities.

Policies are either an explicit (S, A) probability table or a
:class:`~pgrl.policy.CategoricalPolicy` evaluated on one-hot states.
Gradients are only defined for the latter.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .autodiff import ParamVector, Tape, backward, log_softmax
from .policy import CategoricalPolicy, ValueFunction

MAX_STATES = 200
ENUMERATION_CAP = 10**7
_ATOL = 1e-12


class OracleError(RuntimeError):
    pass


@dataclass(eq=False)
class TabularMDP:
    """Finite MDP; rewards are stored as R[s, a, s']."""

    P: np.ndarray
    R: np.ndarray
    gamma: float
    rho0: np.ndarray
    horizon: int | None = None
    name: str = ""

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        self.rho0 = np.asarray(self.rho0, dtype=np.float64)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ValueError(f"P must have shape (S, A, S), got {self.P.shape}")
        S, A, _ = self.P.shape
        if S > MAX_STATES:
            raise ValueError(f"at most {MAX_STATES} states supported, got {S}")
        if R.shape == (S, A):
            R = np.repeat(R[:, :, None], S, axis=2)
        if R.shape != (S, A, S):
            raise ValueError(f"R must have shape (S, A) or (S, A, S), got {R.shape}")
        self.R = R
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > _ATOL:
            raise ValueError("every P[s, a] must be a probability vector")
        if self.rho0.shape != (S,) or np.any(self.rho0 < 0) or abs(self.rho0.sum() - 1.0) > _ATOL:
            raise ValueError("rho0 must be a probability vector over states")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def expected_reward(self) -> np.ndarray:
        """r(s, a) = sum_s' P(s'|s,a) R(s,a,s')."""
        return np.einsum("ijk,ijk->ij", self.P, self.R)

    # construction and IO ---------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> TabularMDP:
        return cls(np.array(d["P"]), np.array(d["R"]), float(d["gamma"]), np.array(d["rho0"]),
                   d.get("horizon"), d.get("name", ""))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "P": self.P.tolist(),
            "R": self.R.tolist(),
            "gamma": self.gamma,
            "rho0": self.rho0.tolist(),
            "horizon": self.horizon,
        }

    @classmethod
    def load(cls, path) -> TabularMDP:
        """Load from a JSON file, or a shipped instance by name
        (``two_state``, ``five_state``)."""
        p = Path(path)
        if not p.exists() and p.suffix == "" and (resources.files("pgrl") / "data" / f"{path}.json").is_file():
            text = (resources.files("pgrl") / "data" / f"{path}.json").read_text()
        else:
            text = p.read_text()
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def chain(cls, n_states: int = 5, slip: float = 0.1, gamma: float = 0.9) -> TabularMDP:
        """Action 0 moves left, action 1 right; with probability ``slip``
        the move goes the other way. Landing on the right end pays 1, on the
        left end 0.2."""
        P = np.zeros((n_states, 2, n_states))
        for s in range(n_states):
            left, right = max(s - 1, 0), min(s + 1, n_states - 1)
            P[s, 0, left] += 1.0 - slip
            P[s, 0, right] += slip
            P[s, 1, right] += 1.0 - slip
            P[s, 1, left] += slip
        R = np.zeros((n_states, 2, n_states))
        R[:, :, -1] = 1.0
        R[:, :, 0] = 0.2
        return cls(P, R, gamma, np.full(n_states, 1.0 / n_states), None, f"chain{n_states}")

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: np.random.Generator, gamma: float = 0.9,
               horizon: int | None = None) -> TabularMDP:
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        R = rng.normal(size=(n_states, n_actions, n_states))
        rho0 = rng.dirichlet(np.ones(n_states))
        return cls(P, R, gamma, rho0, horizon, "random")


# policies ----------------------------------------------------------------------
def one_hot_states(n_states: int) -> np.ndarray:
    return np.eye(n_states)


def policy_table(policy, n_states: int) -> np.ndarray:
    """(S, A) action probabilities for a table or a one-hot categorical policy."""
    if isinstance(policy, CategoricalPolicy):
        return policy.probabilities(one_hot_states(n_states))
    table = np.asarray(policy, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] != n_states:
        raise ValueError(f"policy table must have shape ({n_states}, A), got {table.shape}")
    if np.any(table < 0) or np.max(np.abs(table.sum(axis=1) - 1.0)) > _ATOL:
        raise ValueError("policy rows must be probability vectors")
    return table


def tabular_policy(n_states: int, n_actions: int, logits: np.ndarray | None = None) -> CategoricalPolicy:
    """Linear softmax policy on one-hot states: logits[s] = W[:, s] + b.

    ``logits`` (S, A) initializes W with b = 0.
    """
    from .autodiff import Architecture, mlp_layout

    arch = Architecture((n_states, n_actions), activation="identity")
    w = np.zeros((n_actions, n_states)) if logits is None else np.asarray(logits, dtype=np.float64).T.copy()
    params = ParamVector.from_structured({"layers.0.weight": w, "layers.0.bias": np.zeros(n_actions)},
                                         mlp_layout(arch))
    return CategoricalPolicy(arch, params)


def tabular_value_function(values) -> ValueFunction:
    """Linear critic on one-hot states with V(s) = values[s] exactly."""
    from .autodiff import Architecture, mlp_layout

    v = np.asarray(values, dtype=np.float64)
    arch = Architecture((v.size, 1), activation="identity", prefix="critic")
    params = ParamVector.from_structured({"critic.0.weight": v[None, :].copy(), "critic.0.bias": np.zeros(1)},
                                         mlp_layout(arch))
    return ValueFunction(arch, params)


def score_table(policy: CategoricalPolicy, n_states: int) -> np.ndarray:
    """grad_theta log pi(a|s) for every (s, a), shape (S, A, n_params).

    Computed by reverse-mode sweeps over one recorded forward pass.
    """
    tape = Tape()
    theta = tape.watch(policy.params)
    logp = log_softmax(policy.logits(one_hot_states(n_states), theta))
    out = np.zeros((n_states, policy.n_actions, len(policy.params)))
    for s in range(n_states):
        for a in range(policy.n_actions):
            tape.zero_grad()
            root = logp[s, a]
            out[s, a] = backward(root, theta).values
    return out


# exact evaluation -----------------------------------------------------------------
def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise OracleError(f"singular Bellman system: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise OracleError("Bellman solve produced non-finite values")
    return x


def finite_horizon_values(mdp: TabularMDP, policy, T: int) -> tuple[np.ndarray, np.ndarray]:
    """V[h] and Q[h] for h = 0..T steps to go (V[0] = Q[0] = 0)."""
    if T < 1:
        raise ValueError("horizon must be >= 1")
    pi = policy_table(policy, mdp.n_states)
    r = mdp.expected_reward()
    V = np.zeros((T + 1, mdp.n_states))
    Q = np.zeros((T + 1, mdp.n_states, mdp.n_actions))
    for h in range(1, T + 1):
        Q[h] = r + mdp.gamma * mdp.P @ V[h - 1]
        V[h] = np.sum(pi * Q[h], axis=1)
    return V, Q


def exact_values(mdp: TabularMDP, policy, horizon: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(V, Q) of ``policy``; infinite-horizon unless ``horizon`` is given."""
    if horizon is not None:
        V, Q = finite_horizon_values(mdp, policy, horizon)
        return V[horizon], Q[horizon]
    pi = policy_table(policy, mdp.n_states)
    r = mdp.expected_reward()
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = np.sum(pi * r, axis=1)
    V = _solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    Q = r + mdp.gamma * mdp.P @ V
    return V, Q


def bellman_residual(mdp: TabularMDP, policy, V: np.ndarray) -> float:
    pi = policy_table(policy, mdp.n_states)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = np.sum(pi * mdp.expected_reward(), axis=1)
    return float(np.max(np.abs(V - (r_pi + mdp.gamma * P_pi @ V))))


def exact_objective(mdp: TabularMDP, policy, horizon: int | None = None) -> float:
    V, _ = exact_values(mdp, policy, horizon)
    return float(mdp.rho0 @ V)


def state_occupancy(mdp: TabularMDP, policy, horizon: int | None = None) -> np.ndarray:
    """Discounted occupancy. Infinite horizon: d = rho0^T (I - gamma P_pi)^-1,
    shape (S,). Finite horizon: gamma^t Pr(s_t = s), shape (T, S)."""
    pi = policy_table(policy, mdp.n_states)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    if horizon is None:
        return _solve((np.eye(mdp.n_states) - mdp.gamma * P_pi).T, mdp.rho0)
    d = np.zeros((horizon, mdp.n_states))
    dist = mdp.rho0.copy()
    for t in range(horizon):
        d[t] = mdp.gamma**t * dist
        dist = dist @ P_pi
    return d


def _gradient_from_weights(mdp: TabularMDP, policy: CategoricalPolicy, weights: np.ndarray,
                           horizon: int | None) -> ParamVector:
    """sum over (t,) s, a of occupancy * grad pi(a|s) * weights(t, s, a)."""
    pi = policy_table(policy, mdp.n_states)
    grad_pi = pi[:, :, None] * score_table(policy, mdp.n_states)
    d = state_occupancy(mdp, policy, horizon)
    if horizon is None:
        g = np.einsum("s,sa,sap->p", d, weights, grad_pi)
    else:
        g = np.einsum("ts,tsa,sap->p", d, weights, grad_pi)
    if not np.all(np.isfinite(g)):
        raise OracleError("non-finite policy-gradient entries")
    return policy.params.replace(g)


def _q_weights(mdp: TabularMDP, policy, horizon: int | None) -> np.ndarray:
    if horizon is None:
        return exact_values(mdp, policy)[1]
    _, Q = finite_horizon_values(mdp, policy, horizon)
    # time t has T - t steps to go
    return np.stack([Q[horizon - t] for t in range(horizon)])


def exact_policy_gradient(mdp: TabularMDP, policy: CategoricalPolicy, horizon: int | None = None) -> ParamVector:
    """grad J = sum_s d(s) sum_a Q(s, a) grad pi(a|s) (time-indexed when finite)."""
    return _gradient_from_weights(mdp, policy, _q_weights(mdp, policy, horizon), horizon)


def baseline_gradient(mdp: TabularMDP, policy: CategoricalPolicy, baseline: np.ndarray,
                      horizon: int | None = None) -> ParamVector:
    """Advantage-form gradient with ``Q - b(s)`` in place of ``Q``.

    ``baseline`` is (S,) or, for a finite horizon, (T, S).
    """
    Q = _q_weights(mdp, policy, horizon)
    b = np.asarray(baseline, dtype=np.float64)
    if horizon is not None and b.ndim == 1:
        b = np.broadcast_to(b, (horizon, mdp.n_states))
    return _gradient_from_weights(mdp, policy, Q - b[..., None], horizon)


def verify_baseline_invariance(mdp: TabularMDP, policy: CategoricalPolicy, baseline: np.ndarray,
                               horizon: int | None = None) -> float:
    """max |grad with baseline b - grad with baseline 0|."""
    g_b = baseline_gradient(mdp, policy, baseline, horizon).values
    g_0 = baseline_gradient(mdp, policy, np.zeros(mdp.n_states), horizon).values
    return float(np.max(np.abs(g_b - g_0)))


def advantage_table(mdp: TabularMDP, policy, horizon: int | None = None) -> np.ndarray:
    V, Q = exact_values(mdp, policy, horizon)
    return Q - V[:, None]


# trajectory enumeration ---------------------------------------------------------------
def enumerate_trajectories(mdp: TabularMDP, policy, T: int, cap: int = ENUMERATION_CAP):
    """All length-T trajectories with their exact probabilities.

    Returns ``(states, actions, probs)`` with shapes (M, T+1), (M, T), (M,),
    M = S * (A * S)^T. Zero-probability branches are kept.
    """
    S, A = mdp.n_states, mdp.n_actions
    count = S * (A * S) ** T
    if count * (2 * T + 1) > cap:
        raise OracleError(f"enumeration of {count} trajectories exceeds the cap of {cap} terms")
    pi = policy_table(policy, S)
    states = np.arange(S)[:, None]
    actions = np.zeros((S, 0), dtype=np.int64)
    probs = mdp.rho0.copy()
    for _ in range(T):
        m = len(probs)
        s = states[:, -1]
        a = np.tile(np.repeat(np.arange(A), S), m)
        s_next = np.tile(np.tile(np.arange(S), A), m)
        rep = np.repeat(np.arange(m), A * S)
        probs = probs[rep] * pi[s[rep], a] * mdp.P[s[rep], a, s_next]
        states = np.column_stack([states[rep], s_next])
        actions = np.column_stack([actions[rep], a])
    return states, actions, probs


def _trajectory_rewards(mdp: TabularMDP, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    T = actions.shape[1]
    return np.stack([mdp.R[states[:, t], actions[:, t], states[:, t + 1]] for t in range(T)], axis=1)


def past_reward_score_expectation(mdp: TabularMDP, policy: CategoricalPolicy, T: int) -> np.ndarray:
    """E[sum_t (sum_{t'<t} gamma^t' r_t') grad log pi(a_t|s_t)] by enumeration."""
    states, actions, probs = enumerate_trajectories(mdp, policy, T)
    scores = score_table(policy, mdp.n_states)
    rewards = _trajectory_rewards(mdp, states, actions)
    disc = mdp.gamma ** np.arange(T)
    past = np.cumsum(rewards * disc, axis=1) - rewards * disc  # exclusive prefix sums
    total = np.zeros(scores.shape[-1])
    for t in range(T):
        total += np.einsum("m,m,mp->p", probs, past[:, t], scores[states[:, t], actions[:, t]])
    return total


def verify_past_reward_identity(mdp: TabularMDP, policy: CategoricalPolicy, horizon: int | None = None) -> float:
    """Max absolute component of the past-reward score expectation (0 in exact arithmetic)."""
    T = horizon if horizon is not None else mdp.horizon
    if T is None:
        raise OracleError("a finite horizon is required for enumeration")
    return float(np.max(np.abs(past_reward_score_expectation(mdp, policy, T))))


def enumerated_reinforce_gradient(mdp: TabularMDP, policy: CategoricalPolicy, T: int) -> np.ndarray:
    """E[sum_t gamma^t R_t grad log pi(a_t|s_t)] by enumeration (finite horizon)."""
    states, actions, probs = enumerate_trajectories(mdp, policy, T)
    scores = score_table(policy, mdp.n_states)
    rewards = _trajectory_rewards(mdp, states, actions)
    g = mdp.gamma
    total = np.zeros(scores.shape[-1])
    for t in range(T):
        R_t = sum(g ** (k - t) * rewards[:, k] for k in range(t, T))
        total += np.einsum("m,m,mp->p", probs, g**t * R_t, scores[states[:, t], actions[:, t]])
    return total
