"""Returns, K-step Q estimates, advantages and the critic loss.

A :class:`TrajectoryBuffer` holds transitions from one or more episodes in
collection order. A *segment* is a maximal run of transitions sharing an
episode id; K-step windows never cross a segment end. What a window sees
beyond the segment end depends on how the segment ended:

* ``TruncateTerminal`` (failure): nothing, the tail is dropped.
* ``BootstrapTerminal`` on a time limit: V of the post-terminal observation.
* ``BootstrapTerminal`` on success: 0 (absorbing goal) unless
  ``success_bootstrap`` is set, then V of the post-terminal observation.
* ``Running`` (buffer ended mid-episode): V of the cached final observation.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Node, concatenate
from .policy import ValueFunction


class TerminationKind(enum.Enum):
    RUNNING = "running"
    BOOTSTRAP = "bootstrap_terminal"
    TRUNCATE = "truncate_terminal"

    @property
    def is_terminal(self) -> bool:
        return self is not TerminationKind.RUNNING


@dataclass
class Transition:
    obs: np.ndarray
    action: object
    reward: float
    logp_old: float
    termination: TerminationKind = TerminationKind.RUNNING
    episode_id: int = 0
    step: int = 0
    success: bool = False
    # observation after a terminal step, before the reset
    final_obs: np.ndarray | None = None

    def to_json(self) -> dict:
        act = self.action
        if isinstance(act, np.ndarray):
            act = act.tolist()
        elif isinstance(act, np.integer):
            act = int(act)
        return {
            "obs": np.asarray(self.obs).tolist(),
            "action": act,
            "reward": float(self.reward),
            "logp_old": float(self.logp_old),
            "termination": self.termination.value,
            "episode_id": int(self.episode_id),
            "step": int(self.step),
            "success": bool(self.success),
            "final_obs": None if self.final_obs is None else np.asarray(self.final_obs).tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> Transition:
        act = d["action"]
        return cls(
            obs=np.array(d["obs"], dtype=np.float64),
            action=np.array(act, dtype=np.float64) if isinstance(act, list) else act,
            reward=float(d["reward"]),
            logp_old=float(d["logp_old"]),
            termination=TerminationKind(d["termination"]),
            episode_id=int(d["episode_id"]),
            step=int(d["step"]),
            success=bool(d.get("success", False)),
            final_obs=None if d.get("final_obs") is None else np.array(d["final_obs"], dtype=np.float64),
        )


@dataclass
class EpisodeRecord:
    episode_id: int
    total_reward: float
    length: int
    success: bool
    termination: TerminationKind


class TrajectoryBuffer:
    """Transitions in collection order plus bootstrap observations for
    episodes still running when collection stopped."""

    def __init__(self, horizon: int | None = None, gamma: float = 0.99):
        check_gamma(gamma)
        if horizon is not None and horizon < 1:
            raise ValueError("horizon must be positive")
        self.horizon = horizon
        self.gamma = float(gamma)
        self.transitions: list[Transition] = []
        self.bootstrap_obs: dict[int, np.ndarray] = {}
        self.bootstrap_values: dict[int, float] = {}
        self.episodes: list[EpisodeRecord] = []

    def __len__(self) -> int:
        return len(self.transitions)

    def __getitem__(self, i: int) -> Transition:
        return self.transitions[i]

    def __iter__(self) -> Iterator[Transition]:
        return iter(self.transitions)

    def append(self, tr: Transition) -> None:
        if self.horizon is not None and len(self.transitions) >= self.horizon:
            raise OverflowError(f"buffer already holds {self.horizon} transitions")
        self.transitions.append(tr)

    @property
    def full(self) -> bool:
        return self.horizon is not None and len(self.transitions) == self.horizon

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=np.float64)

    def observations(self) -> np.ndarray:
        return np.stack([np.asarray(t.obs, dtype=np.float64) for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.transitions])

    def logp_old(self) -> np.ndarray:
        return np.array([t.logp_old for t in self.transitions], dtype=np.float64)

    def segments(self) -> list[tuple[int, int]]:
        """Half-open index ranges of contiguous same-episode runs.

        A run also ends after a terminal transition even if the next one
        reuses the id.
        """
        out, start = [], 0
        n = len(self.transitions)
        for i in range(n):
            tr = self.transitions[i]
            last = i == n - 1
            if last or tr.termination.is_terminal or self.transitions[i + 1].episode_id != tr.episode_id:
                out.append((start, i + 1))
                start = i + 1
        return out

    def check(self) -> None:
        """Raise if terminal markers and episode ids disagree."""
        seen_closed = set()
        for i, tr in enumerate(self.transitions):
            if tr.episode_id in seen_closed:
                raise ValueError(f"transition {i} continues episode {tr.episode_id} after its terminal step")
            if tr.termination.is_terminal:
                seen_closed.add(tr.episode_id)

    def dump_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for tr in self.transitions:
                fh.write(json.dumps(tr.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path, gamma: float = 0.99) -> TrajectoryBuffer:
        buf = cls(gamma=gamma)
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    buf.append(Transition.from_json(json.loads(line)))
        return buf


def check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """R_t = sum_{t' >= t} gamma^(t'-t) r_t' over the window, zero beyond it."""
    check_gamma(gamma)
    r = np.asarray(rewards, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def _segment_end(buffer: TrajectoryBuffer, t: int) -> int:
    if not 0 <= t < len(buffer):
        raise IndexError(f"step {t} outside buffer of length {len(buffer)}")
    for start, stop in buffer.segments():
        if start <= t < stop:
            return stop
    raise AssertionError("unreachable")


def k_step_truncated_q(buffer: TrajectoryBuffer, t: int, K: int) -> float:
    """sum_{i<K} gamma^i r_{t+i}, stopping early at the segment end."""
    if K < 1:
        raise ValueError("K must be >= 1")
    stop = min(_segment_end(buffer, t), t + K)
    g = buffer.gamma
    return float(sum(g**i * buffer[t + i].reward for i in range(stop - t)))


def tail_observation(buffer: TrajectoryBuffer, last: int, success_bootstrap: bool = False):
    """Observation whose value closes a segment ending at index ``last``,
    or None when the tail contributes nothing."""
    tr = buffer[last]
    kind = tr.termination
    if kind is TerminationKind.TRUNCATE:
        return None
    if kind is TerminationKind.BOOTSTRAP:
        if tr.success and not success_bootstrap:
            return None
        if tr.final_obs is None:
            raise ValueError(f"bootstrap termination at step {last} has no final observation")
        return tr.final_obs
    if tr.episode_id not in buffer.bootstrap_obs:
        raise ValueError(f"episode {tr.episode_id} is unfinished but has no cached bootstrap observation")
    return buffer.bootstrap_obs[tr.episode_id]


def k_step_bootstrap_q(buffer: TrajectoryBuffer, t: int, K: int, vf: ValueFunction,
                       success_bootstrap: bool = False) -> float:
    """sum_{i<j} gamma^i r_{t+i} + gamma^j V(o_{t+j}) with j = min(K, steps left
    in the segment); the value term follows the segment-end rules above."""
    if K < 1:
        raise ValueError("K must be >= 1")
    end = _segment_end(buffer, t)
    stop = min(end, t + K)
    g = buffer.gamma
    q = sum(g**i * buffer[t + i].reward for i in range(stop - t))
    if stop < end:
        return float(q + g ** (stop - t) * vf.predict(buffer[stop].obs))
    tail = tail_observation(buffer, end - 1, success_bootstrap)
    if tail is None:
        return float(q)
    return float(q + g ** (stop - t) * vf.predict(tail))


def next_values(buffer: TrajectoryBuffer, obs_values: np.ndarray, tail_values,
                segments=None) -> np.ndarray:
    """V of the observation following each transition, in its own segment.

    ``tail_values`` maps a segment's last index to the value closing it
    (missing key means 0), either as a dict or an (indices, values) pair.
    """
    segments = buffer.segments() if segments is None else segments
    obs_values = np.asarray(obs_values, dtype=np.float64)
    nxt = np.zeros(len(buffer))
    nxt[:-1] = obs_values[1:]
    if len(segments):
        lasts = np.asarray(segments, dtype=np.int64)[:, 1] - 1
        nxt[lasts] = 0.0
        if isinstance(tail_values, tuple):
            nxt[np.asarray(tail_values[0], dtype=np.int64)] = tail_values[1]
        elif tail_values:
            keys = np.fromiter(tail_values.keys(), dtype=np.int64, count=len(tail_values))
            nxt[keys] = np.fromiter(tail_values.values(), dtype=np.float64, count=len(tail_values))
    return nxt


def bootstrap_targets(rewards: np.ndarray, nxt: np.ndarray, segments, gamma: float, K: int | None = None) -> np.ndarray:
    """Vectorized K-step bootstrap estimates for every buffer index.

    With ``K=None`` each window runs to its segment end (full-horizon
    bootstrap at the buffer boundary).
    """
    check_gamma(gamma)
    rewards = np.asarray(rewards, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    out = np.empty_like(rewards)
    if K is not None:
        if K < 1:
            raise ValueError("K must be >= 1")
        n = len(rewards)
        seg = np.asarray(segments, dtype=np.int64).reshape(-1, 2)
        end = np.repeat(seg[:, 1], seg[:, 1] - seg[:, 0])
        idx = np.arange(n)
        j = np.minimum(K, end - idx)
        padded = np.concatenate([rewards, np.zeros(K)])
        acc = rewards.copy()
        for i in range(1, K):
            acc += np.where(i < j, gamma**i * padded[i:i + n], 0.0)
        powers = gamma ** np.arange(K + 1)
        return acc + powers[j] * nxt[idx + j - 1]
    for start, stop in segments:
        acc = nxt[stop - 1]
        for t in range(stop - 1, start - 1, -1):
            acc = rewards[t] + gamma * acc
            out[t] = acc
    return out


def buffer_targets(buffer: TrajectoryBuffer, vf: ValueFunction | None, K: int | None = None,
                   success_bootstrap: bool = False, obs_values: np.ndarray | None = None,
                   tail_values: dict[int, float] | None = None):
    """(targets, obs_values, tail_values) for a whole buffer.

    ``vf=None`` means V = 0 everywhere (pure truncated sums). Precomputed
    ``obs_values``/``tail_values`` are reused when given.
    """
    n = len(buffer)
    segments = buffer.segments()
    if obs_values is None:
        obs_values = np.zeros(n) if vf is None else np.atleast_1d(vf.predict(buffer.observations()))
    if tail_values is None:
        lasts, tails = tail_observations(buffer, segments, success_bootstrap)
        tail_values = {}
        if tails and vf is not None:
            vals = np.atleast_1d(vf.predict(np.stack(tails)))
            tail_values = {i: float(v) for i, v in zip(lasts, vals)}
    nxt = next_values(buffer, obs_values, tail_values, segments)
    return bootstrap_targets(buffer.rewards(), nxt, segments, buffer.gamma, K), obs_values, tail_values


def tail_observations(buffer: TrajectoryBuffer, segments=None, success_bootstrap: bool = False):
    """(last indices, observations) for every segment whose tail has a value."""
    segments = buffer.segments() if segments is None else segments
    lasts, tails = [], []
    for _, stop in segments:
        tail = tail_observation(buffer, stop - 1, success_bootstrap)
        if tail is not None:
            lasts.append(stop - 1)
            tails.append(np.asarray(tail, dtype=np.float64))
    return lasts, tails


def advantages(qhat: Sequence[float], values: Sequence[float]) -> np.ndarray:
    """Q-hat minus V, as plain constants (no gradient path)."""
    q = np.asarray(qhat.value if isinstance(qhat, Node) else qhat, dtype=np.float64)
    v = np.asarray(values.value if isinstance(values, Node) else values, dtype=np.float64)
    if q.shape != v.shape:
        raise ValueError(f"length mismatch: {q.shape} vs {v.shape}")
    return q - v


def normalize_advantages(adv: Sequence[float], floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(adv, dtype=np.float64)
    if a.size < 2:
        raise ValueError("need at least two advantages to normalize")
    centered = a - a.mean()
    return centered / max(float(a.std()), floor)


def value_loss(values: Node, targets: Sequence[float]) -> Node:
    """0.5 * mean((V - target)^2); targets are constants."""
    t = np.asarray(targets, dtype=np.float64)
    if isinstance(values, (list, tuple)) and values and isinstance(values[0], Node):
        values = concatenate([v.reshape(1) for v in values])
    elif not isinstance(values, Node):
        values = Node(values)
    if t.size == 0 or values.value.size == 0:
        raise ValueError("value_loss needs at least one sample")
    if values.shape != t.shape:
        raise ValueError(f"length mismatch: {values.shape} vs {t.shape}")
    diff = values - t
    return (diff * diff).mean() * 0.5

