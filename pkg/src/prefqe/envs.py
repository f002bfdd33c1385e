"""Synthetic environments whose state-action pairs sit on a low-dimensional
surface inside a high-dimensional ambient space, with factorized rewards,
plus the transition and preference datasets drawn from them.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DimensionError, SizeError
from .mdp import TabularMdp, Policy, occupancies, dumps_17g
from .preference import choice_probabilities, choices_from_uniforms


@dataclass(frozen=True)
class EnvConfig:
    intrinsic_dim: int = 2
    ambient_dim: int = 10
    feature_dim: int = 1
    num_states: int = 5
    num_actions: int = 3
    horizon: int = 3
    seed: int = 0
    distortion: float = 0.3  # amplitude of the curved coordinates added to the latent point
    frequency: float = 2.0  # frequency of the reward feature map
    random_frame: bool = True
    concentration: float = 1.0  # Dirichlet concentration of transition rows
    feature_bound: float = 1.0
    reward: str = "factorized"  # or "zero"
    anchor: tuple | None = None  # (s, a) for every step; None picks the per-step minimizer
    initial_state: int | None = None  # None: uniform initial distribution
    min_gap: float = 1e-3

    def __post_init__(self):
        if self.intrinsic_dim < 1 or self.intrinsic_dim > self.ambient_dim:
            raise DimensionError(f"need 1 <= d <= D, got d={self.intrinsic_dim}, D={self.ambient_dim}")
        if self.feature_dim < 1 or self.feature_dim > self.intrinsic_dim:
            raise DimensionError(f"need 1 <= feature dim <= d, got {self.feature_dim}")
        if min(self.num_states, self.num_actions, self.horizon) < 1:
            raise ValueError("states, actions and horizon must be positive")
        if self.reward not in ("factorized", "zero"):
            raise ValueError(f"unknown reward kind {self.reward!r}")

    @classmethod
    def from_dict(cls, d) -> "EnvConfig":
        d = dict(d)
        if d.get("anchor") is not None:
            d["anchor"] = tuple(d["anchor"])
        return cls(**d)


@dataclass(frozen=True)
class EmbeddedMdp:
    """A tabular MDP whose (s, a) pairs are embedded as points in R^D.

    ``embedding[s, a]`` is the ambient representation x of the pair and
    ``latent[s, a]`` its intrinsic coordinates in [0, 1]^d. Rewards are
    r_h = f_h(psi_h(x)) rescaled on the finite support; the parameters of
    psi_h and f_h are kept so the smooth reward can be evaluated anywhere.
    """

    mdp: TabularMdp
    embedding: np.ndarray
    latent: np.ndarray
    config: EnvConfig
    psi_weights: np.ndarray = None  # (H, d~, D)
    psi_phase: np.ndarray = None  # (H, d~)
    head_weights: np.ndarray = None  # (H, d~)
    reward_shift: np.ndarray = None  # (H,) raw value mapped to 0
    reward_scale: np.ndarray = None  # (H,) divisor of the min-max rescale

    @property
    def horizon(self):
        return self.mdp.horizon

    @property
    def num_states(self):
        return self.mdp.num_states

    @property
    def num_actions(self):
        return self.mdp.num_actions

    @property
    def ambient_dim(self):
        return self.embedding.shape[-1]

    @property
    def intrinsic_dim(self):
        return self.latent.shape[-1]

    @property
    def bound(self) -> float:
        """Sup-norm bound B of the embedded points."""
        return float(np.abs(self.embedding).max())

    @property
    def rewards(self):
        return self.mdp.rewards

    def anchor_input(self, h) -> np.ndarray:
        s, a = self.mdp.anchor[h - 1]
        return self.embedding[s, a]

    def one_hot(self) -> np.ndarray:
        """One-hot feature table of shape (S, A, S*A)."""
        S, A = self.num_states, self.num_actions
        return np.eye(S * A).reshape(S, A, S * A)

    def features(self, h, x) -> np.ndarray:
        """psi_h(x) in [0, B']^d~ for rows of x."""
        z = np.atleast_2d(x) @ self.psi_weights[h - 1].T + self.psi_phase[h - 1]
        return self.config.feature_bound * 0.5 * (1.0 + np.sin(z))

    def head(self, h, z) -> np.ndarray:
        """f_h(z) in [0, 1]."""
        w = self.head_weights[h - 1]
        centred = np.atleast_2d(z) / self.config.feature_bound - 0.5
        return 0.5 * (1.0 + np.tanh(centred @ w))

    def reward_function(self, h, x) -> np.ndarray:
        """Smooth reward at arbitrary ambient points, matching the table on the support."""
        if self.config.reward == "zero":
            return np.zeros(len(np.atleast_2d(x)))
        raw = self.head(h, self.features(h, x))
        return np.maximum((raw - self.reward_shift[h - 1]) / self.reward_scale[h - 1], 0.0)


def _orthonormal_frame(rng, D, k, random_frame):
    if not random_frame:
        return np.eye(D)[:, :k]
    q, r = np.linalg.qr(rng.normal(size=(D, k)))
    return q * np.sign(np.diag(r))


def _latent_points(rng, n, d):
    """n points in [0, 1]^d, one per distinct cell of a jittered grid.

    Cell width is 1/m; jitter is at most a quarter cell so any two points
    are at least half a cell apart.
    """
    m = max(1, math.ceil(n ** (1.0 / d) - 1e-12))
    while m ** d < n:
        m += 1
    cells = rng.choice(m ** d, size=n, replace=False)
    idx = np.array(np.unravel_index(cells, (m,) * d)).T
    jitter = rng.uniform(-0.25, 0.25, size=(n, d))
    return (idx + 0.5 + jitter) / m


def make_embedded_mdp(config: EnvConfig | None = None, **overrides) -> EmbeddedMdp:
    """Build an environment deterministically from its config (and seed).

    Latent coordinates u(s, a) are spread over [0, 1]^d. They are lifted to
    (u, distortion * sin(pi * (W u + c))), adding up to min(d, D - d) curved
    coordinates, and then mapped into R^D by an orthonormal frame, so
    distances between embedded points are never smaller than the latent
    distances. Rewards compose a sinusoidal feature map psi_h into
    [0, B']^d~ with a tanh head f_h, are min-max rescaled over the support,
    shifted so the anchor is zero, and clipped at zero.
    """
    if config is None:
        config = EnvConfig(**overrides)
    elif overrides:
        config = EnvConfig(**{**asdict(config), **overrides})
    c = config
    rng = np.random.default_rng(np.random.SeedSequence([c.seed, 0x5EED]))
    S, A, H, d, D = c.num_states, c.num_actions, c.horizon, c.intrinsic_dim, c.ambient_dim

    latent = _latent_points(rng, S * A, d)
    extra = min(d, D - d)
    W = rng.normal(size=(extra, d))
    phase = rng.uniform(0, 2 * np.pi, size=extra)
    lifted = np.hstack([latent, c.distortion * np.sin(np.pi * (latent @ W.T) + phase)])
    frame = _orthonormal_frame(rng, D, d + extra, c.random_frame)
    embedding = (lifted @ frame.T).reshape(S, A, D)

    flat = embedding.reshape(S * A, D)
    gaps = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=-1)
    gaps[np.diag_indices_from(gaps)] = np.inf
    if gaps.min() < c.min_gap:
        raise ValueError(f"embedding gap {gaps.min():.3g} below the configured {c.min_gap}")

    P = rng.dirichlet(np.full(S, c.concentration), size=(H, S, A))
    psi_weights = rng.normal(size=(H, c.feature_dim, D))
    psi_weights *= c.frequency / np.linalg.norm(psi_weights, axis=-1, keepdims=True)
    psi_phase = rng.uniform(0, 2 * np.pi, size=(H, c.feature_dim))
    head_weights = rng.normal(0.0, 3.0, size=(H, c.feature_dim))
    env = EmbeddedMdp(None, embedding, latent.reshape(S, A, d), c,
                      psi_weights, psi_phase, head_weights, np.zeros(H), np.ones(H))

    rewards = np.zeros((H, S, A))
    anchor = np.zeros((H, 2), dtype=np.int64)
    shift, scale = np.zeros(H), np.ones(H)
    if c.reward == "factorized":
        for h in range(1, H + 1):
            raw = env.head(h, env.features(h, flat))
            lo, hi = raw.min(), raw.max()
            scale[h - 1] = hi - lo if hi > lo else 1.0
            r = (raw - lo) / scale[h - 1]
            if c.anchor is None:
                anchor[h - 1] = np.unravel_index(int(np.argmin(r)), (S, A))
            else:
                anchor[h - 1] = c.anchor
            offset = r.reshape(S, A)[tuple(anchor[h - 1])]
            shift[h - 1] = lo + offset * scale[h - 1]
            r = np.maximum(r - offset, 0.0)
            r = r.reshape(S, A)
            r[tuple(anchor[h - 1])] = 0.0
            rewards[h - 1] = r
    elif c.anchor is not None:
        anchor[:] = c.anchor

    initial = np.full(S, 1.0 / S) if c.initial_state is None else c.initial_state
    mdp = TabularMdp(P, rewards, initial, anchor)
    return EmbeddedMdp(mdp, embedding, latent.reshape(S, A, d), c,
                       psi_weights, psi_phase, head_weights, shift, scale)


def occupancy_eta(env: EmbeddedMdp, policy: Policy) -> np.ndarray:
    """Per-step sampling distribution equal to the occupancy of ``policy``."""
    return occupancies(env.mdp, policy)


def uniform_eta(env: EmbeddedMdp) -> np.ndarray:
    H, S, A = env.horizon, env.num_states, env.num_actions
    return np.full((H, S, A), 1.0 / (S * A))


def _stream(seed, tag, h):
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, h]))


def _draw_pairs(rng, dist, size, num_actions):
    flat = np.asarray(dist, dtype=float).reshape(-1)
    cdf = np.cumsum(flat)
    cdf /= cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, rng.random(size), side="right"), len(flat) - 1)
    return idx // num_actions, idx % num_actions


@dataclass
class TransitionDataset:
    """K transitions per step; arrays are indexed [h - 1, k]."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    embedding: np.ndarray = field(repr=False)

    @property
    def horizon(self):
        return self.s.shape[0]

    @property
    def size(self):
        return self.s.shape[1]

    def inputs(self, h) -> np.ndarray:
        return self.embedding[self.s[h - 1], self.a[h - 1]]

    def next_inputs(self, h) -> np.ndarray:
        """(K, A, D) embeddings of every action at each successor state."""
        return self.embedding[self.s_next[h - 1]]

    def to_csv(self, path) -> None:
        D = self.embedding.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["h", "k"] + [f"x{i}" for i in range(D)] + ["sprime_index"])
            for h in range(1, self.horizon + 1):
                x = self.inputs(h)
                for k in range(self.size):
                    w.writerow([h, k] + [format(v, ".17g") for v in x[k]] + [int(self.s_next[h - 1, k])])

    @classmethod
    def from_csv(cls, path, env: EmbeddedMdp) -> "TransitionDataset":
        """Read rows back, recovering (s, a) by matching embedded points."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        D = env.ambient_dim
        if len(header) != D + 3:
            raise DimensionError(f"expected {D} embedding columns, found {len(header) - 3}")
        data = np.array(body, dtype=float)
        H = int(data[:, 0].max())
        K = len(data) // H
        s, a = _match_points(env, data[:, 2:2 + D])
        return cls(s.reshape(H, K), a.reshape(H, K), data[:, -1].astype(np.int64).reshape(H, K),
                   env.embedding)


def _match_points(env, x):
    flat = env.embedding.reshape(-1, env.ambient_dim)
    dist = ((x[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
    idx = dist.argmin(axis=1)
    return idx // env.num_actions, idx % env.num_actions


@dataclass
class PreferenceDataset:
    """K_HF comparisons per step. Slot 2 of every triple is the anchor.

    ``cand_s``/``cand_a`` are (H, K_HF, 2) index arrays for the two drawn
    candidates and ``labels`` (H, K_HF) holds the chosen slot in {0, 1, 2}.
    """

    cand_s: np.ndarray
    cand_a: np.ndarray
    labels: np.ndarray
    embedding: np.ndarray = field(repr=False)
    anchor: np.ndarray = None

    @property
    def horizon(self):
        return self.labels.shape[0]

    @property
    def size(self):
        return self.labels.shape[1]

    def candidate_indices(self, h):
        """(K_HF, 3) state and action indices including the anchor slot."""
        K = self.size
        s_f, a_f = self.anchor[h - 1]
        s = np.concatenate([self.cand_s[h - 1], np.full((K, 1), s_f)], axis=1)
        a = np.concatenate([self.cand_a[h - 1], np.full((K, 1), a_f)], axis=1)
        return s, a

    def candidate_inputs(self, h) -> np.ndarray:
        s, a = self.candidate_indices(h)
        return self.embedding[s, a]

    def to_csv(self, path) -> None:
        D = self.embedding.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["h", "k"] + [f"cand0_{i}" for i in range(D)] + [f"cand1_{i}" for i in range(D)]
                       + ["label"])
            for h in range(1, self.horizon + 1):
                x = self.candidate_inputs(h)
                for k in range(self.size):
                    w.writerow([h, k] + [format(v, ".17g") for v in x[k, 0]]
                               + [format(v, ".17g") for v in x[k, 1]] + [int(self.labels[h - 1, k])])

    @classmethod
    def from_csv(cls, path, env: EmbeddedMdp) -> "PreferenceDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        D = env.ambient_dim
        if len(rows[0]) != 2 * D + 3:
            raise DimensionError("candidate columns do not match the ambient dimension")
        data = np.array(rows[1:], dtype=float)
        H = int(data[:, 0].max())
        K = len(data) // H
        s0, a0 = _match_points(env, data[:, 2:2 + D])
        s1, a1 = _match_points(env, data[:, 2 + D:2 + 2 * D])
        return cls(np.stack([s0, s1], axis=1).reshape(H, K, 2), np.stack([a0, a1], axis=1).reshape(H, K, 2),
                   data[:, -1].astype(np.int64).reshape(H, K), env.embedding, env.mdp.anchor)


def generate_transition_dataset(env: EmbeddedMdp, behavior: Policy, K: int, seed) -> TransitionDataset:
    """K i.i.d. draws per step of (s, a) from the behavior occupancy, then s'."""
    if K < 1:
        raise SizeError(f"transition dataset size must be >= 1, got {K}")
    occ = occupancies(env.mdp, behavior)
    H, A = env.horizon, env.num_actions
    s = np.empty((H, K), dtype=np.int64)
    a = np.empty((H, K), dtype=np.int64)
    s_next = np.empty((H, K), dtype=np.int64)
    for h in range(H):
        rng = _stream(seed, 1, h + 1)
        s[h], a[h] = _draw_pairs(rng, occ[h], K, A)
        rows = env.mdp.transitions[h, s[h], a[h]]
        cdf = np.cumsum(rows, axis=1)
        s_next[h] = np.minimum((cdf < rng.random(K)[:, None]).sum(axis=1), env.num_states - 1)
    return TransitionDataset(s, a, s_next, env.embedding)


def generate_preference_dataset(env: EmbeddedMdp, eta, K_HF: int, seed, reward_offset=0.0,
                                rewards=None) -> PreferenceDataset:
    """Two candidates from eta_h plus the anchor; label sampled from the softmax.

    ``reward_offset`` adds a constant to every reward, anchor included,
    before labels are drawn; ``rewards`` replaces the reward table. Both
    exist to exercise invariances; the uniforms that drive the draws never
    depend on reward values.
    """
    if K_HF < 1:
        raise SizeError(f"preference dataset size must be >= 1, got {K_HF}")
    eta = np.asarray(eta, dtype=float)
    H, S, A = env.horizon, env.num_states, env.num_actions
    if eta.shape != (H, S, A):
        raise DimensionError(f"eta must have shape {(H, S, A)}, got {eta.shape}")
    table = env.rewards if rewards is None else np.asarray(rewards, dtype=float)
    cand_s = np.empty((H, K_HF, 2), dtype=np.int64)
    cand_a = np.empty((H, K_HF, 2), dtype=np.int64)
    labels = np.empty((H, K_HF), dtype=np.int64)
    for h in range(H):
        rng = _stream(seed, 2, h + 1)
        s, a = _draw_pairs(rng, eta[h], 2 * K_HF, A)
        cand_s[h] = s.reshape(K_HF, 2)
        cand_a[h] = a.reshape(K_HF, 2)
        u = rng.random(K_HF)
        s_f, a_f = env.mdp.anchor[h]
        r = np.concatenate([table[h][cand_s[h], cand_a[h]], np.full((K_HF, 1), table[h, s_f, a_f])], axis=1)
        labels[h] = choices_from_uniforms(choice_probabilities(r + reward_offset), u)
    return PreferenceDataset(cand_s, cand_a, labels, env.embedding, env.mdp.anchor)


def write_manifest(path, config: EnvConfig, seed, **extra) -> None:
    body = {"env": asdict(config), "seed": seed, **extra}
    Path(path).write_text(dumps_17g(body) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
