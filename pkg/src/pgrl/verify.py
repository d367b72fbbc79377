"""Numerical verification suites: finite-difference gradient checks, exact
tabular identities and Monte-Carlo estimator checks against the oracle.

Each check returns :class:`Check` records with the measured deviation and
its tolerance; :func:`run_suite` bundles them by suite name.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .algos import fit_value_function, reinforce_weights
from .autodiff import OptimizerState, Tape, backward, finite_diff_grad
from .envs import ChainMDPEnv, rollout
from .oracle import (
    TabularMDP,
    baseline_gradient,
    bellman_residual,
    enumerate_trajectories,
    enumerated_reinforce_gradient,
    exact_objective,
    exact_policy_gradient,
    exact_values,
    finite_horizon_values,
    policy_table,
    score_table,
    tabular_policy,
    tabular_value_function,
    verify_baseline_invariance,
    verify_past_reward_identity,
)
from .policy import CategoricalPolicy, GaussianPolicy, ValueFunction, entropy, log_prob, value
from .returns import TerminationKind, TrajectoryBuffer, Transition, buffer_targets, value_loss

GRADCHECK_STEP = 1e-5
GRADCHECK_TOL = 1e-4
# below this magnitude both gradients count as zero for the relative error
GRADCHECK_FLOOR = 1e-6
IDENTITY_TOL = 1e-12


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name}: {self.value:.3e} (tol {self.tol:.0e}){extra}"


def _below(name: str, value: float, tol: float, detail: str = "") -> Check:
    return Check(name, float(value), tol, bool(value < tol), detail)


# gradient checks ----------------------------------------------------------------------
def relative_error(g: np.ndarray, fd: np.ndarray, floor: float = GRADCHECK_FLOOR) -> float:
    """max_i |g_i - fd_i| / max(|g_i|, |fd_i|, floor)."""
    g, fd = np.asarray(g), np.asarray(fd)
    return float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)))


def _autodiff_grad(fn, params):
    tape = Tape()
    theta = tape.watch(params)
    return backward(fn(theta), theta).values


def _random_models(rng: np.random.Generator):
    obs_dim = int(rng.integers(1, 5))
    hidden = tuple(int(w) for w in rng.integers(2, 9, size=int(rng.integers(1, 3))))
    kind = int(rng.integers(3))
    if kind == 2:
        policy = CategoricalPolicy.create(obs_dim, int(rng.integers(2, 5)), hidden, rng)
    else:
        policy = GaussianPolicy.create(obs_dim, int(rng.integers(1, 4)), hidden, rng, state_dependent_std=kind == 1,
                                       log_std_init=float(rng.uniform(-1, 0.5)))
        if kind == 0:
            # move log-sigma off its constant start
            values = policy.params.values.copy()
            values[-policy.action_dim:] += rng.normal(0, 0.3, policy.action_dim)
            policy = policy.with_params(policy.params.replace(values))
    vf = ValueFunction.create(obs_dim, hidden, rng)
    return policy, vf


def gradcheck(n_networks: int = 100, seed: int = 0, batch: int = 5) -> list[Check]:
    """Autodiff vs central differences for log_prob, entropy and value_loss."""
    rng = np.random.default_rng(seed)
    worst = {"log_prob": 0.0, "entropy": 0.0, "value_loss": 0.0}
    t0 = time.perf_counter()
    for _ in range(n_networks):
        policy, vf = _random_models(rng)
        obs = rng.normal(size=(batch, policy.obs_dim))
        if isinstance(policy, CategoricalPolicy):
            actions = rng.integers(policy.n_actions, size=batch)
        else:
            actions = rng.normal(size=(batch, policy.action_dim))
        targets = rng.normal(size=batch)
        fns = {
            "log_prob": (policy, lambda th: log_prob(policy, obs, actions, th).sum(),
                         lambda p: float(log_prob(policy.with_params(p), obs, actions).value.sum())),
            "entropy": (policy, lambda th: entropy(policy, obs, th).mean(),
                        lambda p: float(entropy(policy.with_params(p), obs).value.mean())),
            "value_loss": (vf, lambda ph: value_loss(value(vf, obs, ph), targets),
                           lambda p: value_loss(value(vf.with_params(p), obs), targets).item()),
        }
        for name, (model, node_fn, float_fn) in fns.items():
            g = _autodiff_grad(node_fn, model.params)
            fd = finite_diff_grad(float_fn, model.params, GRADCHECK_STEP).values
            worst[name] = max(worst[name], relative_error(g, fd))
    elapsed = time.perf_counter() - t0
    return [
        _below(f"gradcheck {name} ({n_networks} networks)", err, GRADCHECK_TOL, f"{elapsed:.1f}s total")
        for name, err in worst.items()
    ]


# exact identities ---------------------------------------------------------------------
def shipped_policy(mdp: TabularMDP, seed: int = 0) -> CategoricalPolicy:
    """Fixed non-uniform softmax policy used by the tabular checks."""
    rng = np.random.default_rng(seed)
    return tabular_policy(mdp.n_states, mdp.n_actions, rng.normal(0, 1, (mdp.n_states, mdp.n_actions)))


def identities(mdp_name: str = "two_state", seed: int = 0) -> list[Check]:
    mdp = TabularMDP.load(mdp_name)
    policy = shipped_policy(mdp, seed)
    T = mdp.horizon
    checks = [_below(f"past-reward score expectation, T={T}", verify_past_reward_identity(mdp, policy, T),
                     IDENTITY_TOL)]

    V, _ = exact_values(mdp, policy)
    checks.append(_below("Bellman residual of linear solve", bellman_residual(mdp, policy, V), IDENTITY_TOL))

    # finite-horizon objective: enumeration vs backward induction
    states, actions, probs = enumerate_trajectories(mdp, policy, T)
    disc = mdp.gamma ** np.arange(T)
    rewards = np.stack([mdp.R[states[:, t], actions[:, t], states[:, t + 1]] for t in range(T)], axis=1)
    J_enum = float(probs @ (rewards @ disc))
    checks.append(_below(f"enumerated J vs backward induction, T={T}",
                         abs(J_enum - exact_objective(mdp, policy, T)), IDENTITY_TOL))
    g_enum = enumerated_reinforce_gradient(mdp, policy, T)
    g_exact = exact_policy_gradient(mdp, policy, T).values
    checks.append(_below(f"enumerated REINFORCE gradient vs exact, T={T}",
                         float(np.max(np.abs(g_enum - g_exact))), IDENTITY_TOL))

    rng = np.random.default_rng(seed + 1)
    V_T, _ = finite_horizon_values(mdp, policy, T)
    baselines = {
        "V": (V, None),
        "uniform[-5,5]": (rng.uniform(-5, 5, mdp.n_states), None),
        "constant 10": (np.full(mdp.n_states, 10.0), None),
        "V (finite horizon)": (np.stack([V_T[T - t] for t in range(T)]), T),
        "time-varying uniform[-5,5]": (rng.uniform(-5, 5, (T, mdp.n_states)), T),
    }
    for label, (b, horizon) in baselines.items():
        checks.append(_below(f"baseline invariance, b = {label}",
                             verify_baseline_invariance(mdp, policy, b, horizon), IDENTITY_TOL))
    return checks


# Monte-Carlo estimators -------------------------------------------------------------------
@dataclass
class EstimatorSample:
    """Per-episode gradient estimates on a shared set of sampled episodes."""

    reinforce: np.ndarray  # (M, n_params)
    advantage: np.ndarray  # (M, n_params), exact time-dependent V as baseline
    exact: np.ndarray
    seconds: float


def sample_estimates(episodes: int = 100_000, horizon: int | None = None, seed: int = 0,
                     mdp_name: str = "two_state") -> EstimatorSample:
    """Roll out ``episodes`` single episodes of length ``horizon`` (default:
    the MDP's own) and form REINFORCE and V-baseline estimates from the
    same transitions."""
    mdp = TabularMDP.load(mdp_name)
    horizon = mdp.horizon if horizon is None else horizon
    policy = shipped_policy(mdp, seed)
    env = ChainMDPEnv(mdp, max_episode_steps=horizon)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    buf = TrajectoryBuffer(None, mdp.gamma)
    rollout(env, policy, None, buf, episodes * horizon, rng)
    idx, w, m = reinforce_weights(buf, mdp.gamma)
    if m != episodes:
        raise AssertionError(f"expected {episodes} complete episodes, got {m}")
    states = np.argmax(buf.observations(), axis=1)[idx]
    actions = buf.actions()[idx].astype(np.int64)
    steps = np.array([buf[i].step for i in idx])
    episode = np.array([buf[i].episode_id for i in idx])
    scores = score_table(policy, mdp.n_states)[states, actions]

    V, _ = finite_horizon_values(mdp, policy, horizon)
    baseline = V[horizon - steps, states]
    w_adv = w - mdp.gamma**steps * baseline

    def per_episode(weights):
        out = np.zeros((episodes, scores.shape[1]))
        np.add.at(out, episode, weights[:, None] * scores)
        return out

    exact = exact_policy_gradient(mdp, policy, horizon).values
    return EstimatorSample(per_episode(w), per_episode(w_adv), exact, time.perf_counter() - t0)


def unbiasedness_checks(sample: EstimatorSample, n_se: float = 3.0) -> list[Check]:
    checks = []
    M = len(sample.reinforce)
    for label, est in (("REINFORCE", sample.reinforce), ("V-baseline", sample.advantage)):
        se = est.std(axis=0, ddof=1) / math.sqrt(M)
        z = np.abs(est.mean(axis=0) - sample.exact) / np.maximum(se, 1e-300)
        checks.append(_below(f"{label} mean within {n_se:g} SE of exact gradient ({M} episodes)",
                             float(np.max(z)), n_se, f"max |z| over components; {sample.seconds:.1f}s sampling"))
    return checks


def variance_reduction_check(sample: EstimatorSample) -> Check:
    ratio = sample.advantage.var(axis=0, ddof=1) / sample.reinforce.var(axis=0, ddof=1)
    detail = "per-component var ratio " + ", ".join(f"{r:.3f}" for r in ratio)
    return _below("V-baseline variance / REINFORCE variance (max over components)", float(np.max(ratio)), 1.0,
                  detail)


def unbiasedness(episodes: int = 100_000, seed: int = 0) -> list[Check]:
    sample = sample_estimates(episodes, seed=seed)
    return unbiasedness_checks(sample) + [variance_reduction_check(sample)]


# critic and bootstrap checks --------------------------------------------------------------------
def chain_policy(mdp: TabularMDP, preference: float = 1.0) -> CategoricalPolicy:
    """Fixed right-leaning policy on the chain: pi(right) = 1/(1+exp(-preference))."""
    return tabular_policy(mdp.n_states, mdp.n_actions, np.tile([0.0, preference], (mdp.n_states, 1)))


def sample_tabular_buffer(mdp: TabularMDP, policy: CategoricalPolicy, episodes: int, length: int,
                          rng: np.random.Generator) -> TrajectoryBuffer:
    """Vectorized equivalent of rolling ``policy`` in ``ChainMDPEnv(mdp, length)``.

    Records match the environment's: one-hot observations, RUNNING steps and
    a BOOTSTRAP time limit carrying the final observation. Rows of one
    identity matrix are shared, so large buffers stay small.
    """
    n = mdp.n_states
    eye = np.eye(n)
    onehot = [eye[k] for k in range(n)]
    pi = policy_table(policy, n)
    s = _draw_rows(np.broadcast_to(mdp.rho0, (episodes, n)), rng)
    S = np.empty((length + 1, episodes), dtype=np.int64)
    A = np.empty((length, episodes), dtype=np.int64)
    S[0] = s
    for t in range(length):
        A[t] = _draw_rows(pi[S[t]], rng)
        S[t + 1] = _draw_rows(mdp.P[S[t], A[t]], rng)
    R = mdp.R[S[:-1], A, S[1:]]
    logp = np.log(pi[S[:-1], A])
    buf = TrajectoryBuffer(None, mdp.gamma)
    run, boot = TerminationKind.RUNNING, TerminationKind.BOOTSTRAP
    for e in range(episodes):
        for t in range(length):
            last = t == length - 1
            buf.transitions.append(Transition(onehot[S[t, e]], int(A[t, e]), float(R[t, e]), float(logp[t, e]),
                                              boot if last else run, e, t, False,
                                              onehot[S[t + 1, e]] if last else None))
    return buf


def _draw_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(cdf))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def td_convergence(transitions: int = 1_500_000, iterations: int = 300, seed: int = 0,
                   mdp_name: str = "five_state") -> tuple[float, float]:
    """Fit a K=1 bootstrapped critic on sampled transitions.

    Returns (max_s |V_phi(s) - V_pi(s)|, seconds). Episodes of 10 steps
    start from the uniform initial distribution, so every state is covered.
    The critic converges to the TD fixed point of the sampled data; the
    transition count puts that sampling error well below 1e-2.
    """
    mdp = TabularMDP.load(mdp_name)
    policy = chain_policy(mdp, preference=2.0)
    V_true, _ = exact_values(mdp, policy)
    t0 = time.perf_counter()
    length = 10
    buf = sample_tabular_buffer(mdp, policy, transitions // length, length, np.random.default_rng(seed))
    vf = tabular_value_function(np.zeros(mdp.n_states))
    opt = OptimizerState.zeros(len(vf.params), lr=0.2)
    vf, opt, _ = fit_value_function(buf, vf, opt, iterations, K=1)
    err = float(np.max(np.abs(vf.predict(np.eye(mdp.n_states)) - V_true)))
    return err, time.perf_counter() - t0


def k_variance_curve(Ks=tuple(range(1, 9)), transitions: int = 50_000, seed: int = 0,
                     mdp_name: str = "five_state") -> dict[int, float]:
    """Mean per-component variance of (Q_K - V) grad log pi over one shared buffer.

    The critic is the exact V of the sampling policy, so every K gives an
    unbiased advantage; only the variance changes.
    """
    mdp = TabularMDP.load(mdp_name)
    policy = chain_policy(mdp)
    V, _ = exact_values(mdp, policy)
    vf = tabular_value_function(V)
    env = ChainMDPEnv(mdp, max_episode_steps=50)
    rng = np.random.default_rng(seed)
    buf = TrajectoryBuffer(None, mdp.gamma)
    rollout(env, policy, vf, buf, transitions, rng)
    states = np.argmax(buf.observations(), axis=1)
    scores = score_table(policy, mdp.n_states)[states, buf.actions().astype(np.int64)]
    curve = {}
    for K in Ks:
        targets, obs_values, _ = buffer_targets(buf, vf, K)
        per_sample = (targets - obs_values)[:, None] * scores
        curve[K] = float(np.mean(per_sample.var(axis=0, ddof=1)))
    return curve


# suites ------------------------------------------------------------------------------------
SUITES = {
    "gradcheck": gradcheck,
    "identities": identities,
    "unbiasedness": unbiasedness,
}
SUITE_NAMES = (*SUITES, "all")


def run_suite(name: str) -> list[Check]:
    if name not in SUITE_NAMES:
        raise KeyError(f"unknown suite {name!r}; expected one of {', '.join(SUITE_NAMES)}")
    names = list(SUITES) if name == "all" else [name]
    checks = []
    for n in names:
        checks.extend(SUITES[n]())
    return checks
