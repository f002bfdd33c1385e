"""Softmax choice model over a small set of candidate state-action pairs."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError


def _check_finite(x):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("rewards must be finite")
    return x


def choice_probabilities(rewards) -> np.ndarray:
    """P(choose i) = exp(r_i) / sum_j exp(r_j) along the last axis."""
    r = _check_finite(rewards)
    z = r - r.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_sum_exp(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    m = r.max(axis=-1)
    return m + np.log(np.exp(r - m[..., None]).sum(axis=-1))


def sample_choice(probs, rng: np.random.Generator):
    """Inverse-CDF sample; one index for a vector, one per row for a matrix."""
    p = np.asarray(probs, dtype=float)
    u = rng.random(p.shape[:-1])
    return choices_from_uniforms(p, u)


def choices_from_uniforms(probs, u) -> np.ndarray:
    """Map uniforms to labels through the CDF of each row of ``probs``.

    Drawing the uniforms separately keeps the labels a deterministic
    function of (probabilities, uniforms), which is what makes a common
    reward shift leave a seeded dataset unchanged.
    """
    p = np.asarray(probs, dtype=float)
    cdf = np.cumsum(p, axis=-1)
    idx = (cdf < np.asarray(u)[..., None]).sum(axis=-1)
    out = np.minimum(idx, p.shape[-1] - 1)
    return int(out) if out.ndim == 0 else out


def negative_log_likelihood(candidate_rewards, labels, weights=None) -> float:
    """-sum_k [r_k(y_k) - log sum_i exp r_k(i)] for rewards of shape (n, M)."""
    r = np.atleast_2d(_check_finite(candidate_rewards))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    terms = log_sum_exp(r) - r[np.arange(len(y)), y]
    if weights is not None:
        terms = terms * np.asarray(weights, dtype=float)
    return float(terms.sum())


def nll_reward_gradient(candidate_rewards, labels, weights=None) -> np.ndarray:
    """Gradient of :func:`negative_log_likelihood` w.r.t. each candidate reward."""
    r = np.atleast_2d(_check_finite(candidate_rewards))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    g = choice_probabilities(r)
    g[np.arange(len(y)), y] -= 1.0
    if weights is not None:
        g *= np.asarray(weights, dtype=float)[:, None]
    return g


def dataset_nll(candidate_inputs, labels, reward_fn) -> float:
    """NLL of one step's preference slice under ``reward_fn``.

    ``candidate_inputs`` has shape (n, M, D) and ``reward_fn`` maps an
    (m, D) array to m rewards.
    """
    x = np.asarray(candidate_inputs, dtype=float)
    n, M, D = x.shape
    r = np.asarray(reward_fn(x.reshape(n * M, D)), dtype=float).reshape(n, M)
    return negative_log_likelihood(r, labels)


def anchor_identity_terms(true_rewards, learned_rewards, anchor_index=-1):
    """Both sides of the reward-gap versus choice-gap inequality.

    Returns ``(lhs, rhs)`` with lhs the summed squared gap between true
    rewards and anchor-normalized learned rewards over the candidates, and
    rhs = 20 * ||rho_learned - rho_true||_1 ** 2.
    """
    r = np.asarray(true_rewards, dtype=float)
    lr = np.asarray(learned_rewards, dtype=float)
    normalized = lr - np.take(lr, [anchor_index], axis=-1)
    lhs = ((r - normalized) ** 2).sum(axis=-1)
    l1 = np.abs(choice_probabilities(lr) - choice_probabilities(r)).sum(axis=-1)
    return lhs, 20.0 * l1 ** 2
