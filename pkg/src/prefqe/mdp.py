"""Finite-horizon tabular MDPs with exact dynamic-programming oracles.

Steps are numbered 1..H in every public function that takes a step
argument. Arrays carry the step on their leading axis, so step ``h`` lives
at index ``h - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError

SIMPLEX_TOL = 1e-12


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one index per row of ``probs``."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass(frozen=True)
class TabularMdp:
    """Finite-horizon MDP with per-step kernels and rewards.

    ``transitions`` has shape (H, S, A, S) and ``rewards`` (H, S, A).
    ``initial`` is a distribution over states; pass an int for a fixed
    start state. ``anchor`` holds one (state, action) pair per step whose
    reward is exactly zero.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    initial: np.ndarray
    anchor: np.ndarray

    def __post_init__(self):
        P = _frozen(self.transitions)
        r = _frozen(self.rewards)
        if P.ndim != 4 or P.shape[1] != P.shape[3]:
            raise DimensionError(f"transitions must be (H, S, A, S), got {P.shape}")
        H, S, A, _ = P.shape
        if r.shape != (H, S, A):
            for h in range(min(len(r), H)):
                if np.shape(r[h]) != (S, A):
                    raise DimensionError(f"rewards at step {h + 1} have shape {np.shape(r[h])}", step=h + 1)
            raise DimensionError(f"rewards must be {(H, S, A)}, got {r.shape}", step=min(len(r), H) + 1)
        if np.isscalar(self.initial) or np.ndim(self.initial) == 0:
            xi = np.zeros(S)
            xi[int(self.initial)] = 1.0
        else:
            xi = np.asarray(self.initial, dtype=float)
        xi = _frozen(xi)
        anchor = _frozen(np.broadcast_to(np.asarray(self.anchor, dtype=np.int64), (H, 2)), dtype=np.int64)

        for h in range(H):
            if np.any(P[h] < 0) or np.any(np.abs(P[h].sum(axis=-1) - 1.0) > SIMPLEX_TOL):
                raise ValueError(f"transition rows at step {h + 1} are not on the simplex")
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if xi.shape != (S,) or np.any(xi < 0) or abs(xi.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError("initial distribution is not on the simplex")
        for h, (s, a) in enumerate(anchor):
            if not (0 <= s < S and 0 <= a < A):
                raise DimensionError(f"anchor {tuple(anchor[h])} out of range", step=h + 1)
            if r[h, s, a] != 0.0:
                raise ValueError(f"anchor reward at step {h + 1} is {r[h, s, a]}, must be 0")

        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "initial", xi)
        object.__setattr__(self, "anchor", anchor)

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[2]

    def with_rewards(self, rewards, anchor=None) -> "TabularMdp":
        return TabularMdp(self.transitions, rewards, self.initial,
                          self.anchor if anchor is None else anchor)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "initial": self.initial.tolist(),
            "anchor": self.anchor.tolist(),
        }

    def to_json(self) -> str:
        return dumps_17g(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TabularMdp":
        mdp = cls(np.array(d["transitions"], dtype=float), np.array(d["rewards"], dtype=float),
                  d["initial"] if np.ndim(d["initial"]) == 0 else np.array(d["initial"], dtype=float),
                  np.array(d["anchor"], dtype=np.int64))
        if (mdp.horizon, mdp.num_states, mdp.num_actions) != (d["horizon"], d["num_states"], d["num_actions"]):
            raise DimensionError("declared sizes disagree with array shapes")
        return mdp

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


def dumps_17g(obj) -> str:
    """JSON text with every float written to 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps_17g(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps_17g(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return json.dumps(obj if not isinstance(obj, np.bool_) else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise ValueError("non-finite float is not valid JSON")
        return format(x, ".17g")
    if isinstance(obj, np.ndarray):
        return dumps_17g(obj.tolist())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


@dataclass(frozen=True)
class Policy:
    """Per-step action distributions, ``probs[h - 1][s, a] = pi_h(a | s)``."""

    probs: tuple

    def __post_init__(self):
        steps = tuple(_frozen(p) for p in self.probs)
        for h, p in enumerate(steps):
            if p.ndim != 2:
                raise DimensionError(f"policy at step {h + 1} must be (S, A)", step=h + 1)
            if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > SIMPLEX_TOL):
                raise ValueError(f"policy at step {h + 1} is not a distribution over actions")
        object.__setattr__(self, "probs", steps)

    @property
    def horizon(self) -> int:
        return len(self.probs)

    def step(self, h: int) -> np.ndarray:
        return self.probs[h - 1]

    def as_array(self) -> np.ndarray:
        return np.stack(self.probs)

    def check(self, mdp: TabularMdp) -> None:
        """Raise DimensionError naming the first step where shapes disagree."""
        S, A = mdp.num_states, mdp.num_actions
        for h in range(1, mdp.horizon + 1):
            if h > self.horizon:
                raise DimensionError(f"policy has no entry for step {h}", step=h)
            if self.step(h).shape != (S, A):
                raise DimensionError(
                    f"policy at step {h} has shape {self.step(h).shape}, MDP needs {(S, A)}", step=h)
        if self.horizon != mdp.horizon:
            raise DimensionError(f"policy has {self.horizon} steps, MDP horizon is {mdp.horizon}",
                                 step=mdp.horizon + 1)

    @classmethod
    def uniform(cls, horizon, num_states, num_actions) -> "Policy":
        p = np.full((num_states, num_actions), 1.0 / num_actions)
        return cls(tuple(p for _ in range(horizon)))

    @classmethod
    def deterministic(cls, actions, num_actions) -> "Policy":
        """``actions[h - 1][s]`` is the action taken in state s at step h."""
        actions = np.asarray(actions, dtype=np.int64)
        eye = np.eye(num_actions)
        return cls(tuple(eye[row] for row in actions))

    @classmethod
    def from_callable(cls, fn: Callable[[int, int], Sequence[float]], horizon, num_states) -> "Policy":
        """Tabulate ``fn(h, s) -> action distribution`` over all steps and states."""
        return cls(tuple(np.array([fn(h, s) for s in range(num_states)], dtype=float)
                         for h in range(1, horizon + 1)))

    @classmethod
    def softmax_random(cls, horizon, num_states, num_actions, seed, temperature=1.0) -> "Policy":
        rng = np.random.default_rng(seed)
        logits = rng.normal(size=(horizon, num_states, num_actions)) / temperature
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        return cls(tuple(p))

    def to_dict(self) -> dict:
        return {"probs": [p.tolist() for p in self.probs]}

    @classmethod
    def from_dict(cls, d) -> "Policy":
        return cls(tuple(np.array(p, dtype=float) for p in d["probs"]))


class Step(NamedTuple):
    h: int
    s: int
    a: int
    r: float
    s_next: int


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def total_reward(self) -> float:
        return float(sum(st.r for st in self.steps))


def exact_q_function(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """Backward recursion; returns Q of shape (H, S, A) with Q_{H+1} = 0."""
    policy.check(mdp)
    H = mdp.horizon
    Q = np.zeros_like(mdp.rewards)
    Q[H - 1] = mdp.rewards[H - 1]
    for h in range(H - 2, -1, -1):
        v_next = (policy.probs[h + 1] * Q[h + 1]).sum(axis=1)
        Q[h] = mdp.rewards[h] + mdp.transitions[h] @ v_next
    return Q


def exact_policy_value(mdp: TabularMdp, policy: Policy) -> float:
    Q = exact_q_function(mdp, policy)
    return float(mdp.initial @ (policy.probs[0] * Q[0]).sum(axis=1))


def occupancies(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """State-action occupancy for every step, shape (H, S, A)."""
    policy.check(mdp)
    H = mdp.horizon
    occ = np.zeros_like(mdp.rewards)
    state = mdp.initial.copy()
    for h in range(H):
        occ[h] = state[:, None] * policy.probs[h]
        if h + 1 < H:
            state = np.einsum("sa,sat->t", occ[h], mdp.transitions[h])
    return occ


def visitation_distribution(mdp: TabularMdp, policy: Policy, h: int) -> np.ndarray:
    """Exact occupancy q_h over (s, a) at step ``h`` (1-based), shape (S, A)."""
    if not 1 <= h <= mdp.horizon:
        raise ValueError(f"step h={h} outside 1..{mdp.horizon}")
    return occupancies(mdp, policy)[h - 1]


def rollout(mdp: TabularMdp, policy: Policy, rng: np.random.Generator) -> Trajectory:
    policy.check(mdp)
    s = int(categorical(rng, mdp.initial)[0])
    traj = Trajectory()
    for h in range(mdp.horizon):
        a = int(categorical(rng, policy.probs[h][s])[0])
        s_next = int(categorical(rng, mdp.transitions[h, s, a])[0])
        traj.steps.append(Step(h + 1, s, a, float(mdp.rewards[h, s, a]), s_next))
        s = s_next
    return traj


def rollout_batch(mdp: TabularMdp, policy: Policy, n: int, rng: np.random.Generator):
    """Vectorized rollouts. Returns (states, actions, rewards), each (n, H)."""
    policy.check(mdp)
    H = mdp.horizon
    states = np.empty((n, H), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    s = categorical(rng, np.broadcast_to(mdp.initial, (n, mdp.num_states)))
    for h in range(H):
        states[:, h] = s
        a = categorical(rng, policy.probs[h][s])
        actions[:, h] = a
        s = categorical(rng, mdp.transitions[h, s, a])
    rewards = mdp.rewards[np.arange(H)[None, :], states, actions]
    return states, actions, rewards


def monte_carlo_value(mdp, policy, n, rng) -> tuple[float, float]:
    """Mean return over ``n`` rollouts and its standard error."""
    _, _, rewards = rollout_batch(mdp, policy, n, rng)
    returns = rewards.sum(axis=1)
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(n))


def random_tabular_mdp(horizon, num_states, num_actions, seed, concentration=1.0,
                       initial=None, anchor=(0, 0)) -> TabularMdp:
    """Dirichlet transitions and uniform rewards; the anchor reward is zeroed."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(num_states, concentration), size=(horizon, num_states, num_actions))
    r = rng.random((horizon, num_states, num_actions))
    anchor = np.broadcast_to(np.asarray(anchor, dtype=np.int64), (horizon, 2))
    for h, (s, a) in enumerate(anchor):
        r[h, s, a] = 0.0
    if initial is None:
        initial = np.full(num_states, 1.0 / num_states)
    return TabularMdp(P, r, initial, anchor)
