"""Chi-square style distribution-shift diagnostics on finite supports.

Restricted divergences are computed over a finite set of probe functions,
so every value reported here is a lower bound on the divergence over the
full function class the probes are drawn from.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import SupportError
from .mdp import occupancies
from .relu_net import NetConfig, ReluNetwork

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class FiniteDistribution:
    probs: np.ndarray
    labels: tuple = None

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)
        if self.labels is None:
            object.__setattr__(self, "labels", tuple(range(len(p))))


@dataclass(frozen=True)
class ProbeClass:
    """Probe function values on the support, one row per probe."""

    values: np.ndarray
    names: tuple = None

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(v)):
            raise ValueError("probe values must be finite")
        object.__setattr__(self, "values", v)
        if self.names is None:
            object.__setattr__(self, "names", tuple(f"probe{i}" for i in range(len(v))))

    def __len__(self):
        return len(self.values)

    def union(self, other: "ProbeClass") -> "ProbeClass":
        return ProbeClass(np.vstack([self.values, other.values]), self.names + other.names)


def _probs(d):
    return d.probs if isinstance(d, FiniteDistribution) else np.asarray(d, dtype=float).reshape(-1)


def _labels(d, n):
    return d.labels if isinstance(d, FiniteDistribution) else tuple(range(n))


def pearson_chi_square(p, q) -> float:
    """sum_x q(x) (p(x)/q(x) - 1)^2 with 0/0 = 0; p must vanish where q does."""
    p, q_dist = _probs(p), q
    q = _probs(q)
    if p.shape != q.shape:
        raise ValueError("distributions live on different supports")
    bad = (q == 0) & (p > 0)
    if bad.any():
        atom = _labels(q_dist, len(q))[int(np.argmax(bad))]
        raise SupportError(f"p puts mass {p[bad][0]:.3g} on atom {atom!r} where q has none", atom=atom)
    live = q > 0
    return float(((p[live] - q[live]) ** 2 / q[live]).sum())


def probe_ratios(q1, q2, probes) -> np.ndarray:
    """E_q1[f]^2 / E_q2[f^2] per probe; NaN for 0/0 probes, inf for x/0."""
    q1, q2 = _probs(q1), _probs(q2)
    F = probes.values if isinstance(probes, ProbeClass) else np.atleast_2d(probes)
    num = (F @ q1) ** 2
    den = (F ** 2) @ q2
    with np.errstate(divide="ignore", invalid="ignore"):
        r = num / den
    r[(den == 0) & (num == 0)] = np.nan
    r[(den == 0) & (num > 0)] = np.inf
    return r


def restricted_chi_square(q1, q2, probes) -> float:
    """max over probes of E_q1[f]^2 / E_q2[f^2], minus one.

    Probes with 0/0 ratios are skipped; a probe with E_q2[f^2] = 0 but a
    nonzero mean under q1 makes the divergence infinite.
    """
    r = probe_ratios(q1, q2, probes)
    usable = ~np.isnan(r)
    if not usable.any():
        raise ValueError("no usable probes")
    return float(r[usable].max() - 1.0)


def verify_shift_bound(g, q1, q2, probes, rtol=1e-12):
    """Check E_q1[g] <= sqrt(E_q2[g^2] (1 + restricted chi^2)).

    Returns ``(holds, slack)`` where slack = rhs - lhs. ``g`` should be one
    of the probes used to compute the divergence.
    """
    g = np.asarray(g, dtype=float).reshape(-1)
    lhs = float(g @ _probs(q1))
    second = float(g ** 2 @ _probs(q2))
    chi2 = restricted_chi_square(q1, q2, probes)
    if second > 0:
        rhs = float(np.sqrt(second * (1.0 + chi2)))
    else:
        # 0/0 convention: g vanishes on q2's support; only a zero q1-mean is bounded
        rhs = np.inf if (lhs != 0 and chi2 == np.inf) else 0.0
    holds = lhs <= rhs * (1 + rtol) + rtol
    return bool(holds), rhs - lhs


def sign_pattern_probes(n) -> ProbeClass:
    """All 2^n functions with values in {-1, +1} on an n-point support."""
    values = np.array(list(itertools.product((-1.0, 1.0), repeat=n)))
    return ProbeClass(values)


def angle_grid_probes(count=10_000) -> ProbeClass:
    """Unit vectors (cos t, sin t) on a two-point support; up to scale these
    are every function on two points."""
    t = np.linspace(0.0, np.pi, count, endpoint=False)
    return ProbeClass(np.stack([np.cos(t), np.sin(t)], axis=1))


def default_probes(env, seed=0, n_nets=64, degree=4, net_config=None) -> ProbeClass:
    """Constant probe, monomials and sinusoids of the embedded coordinates up
    to ``degree``, and random constrained ReLU networks, on the finite support."""
    x = env.embedding.reshape(-1, env.ambient_dim)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    rows, names = [np.ones(len(x))], ["const"]
    for k in range(1, degree + 1):
        for j in range(x.shape[1]):
            rows.append(x[:, j] ** k)
            names.append(f"x{j}^{k}")
        for _ in range(x.shape[1]):
            w = rng.normal(size=x.shape[1])
            rows += [np.sin(k * x @ w), np.cos(k * x @ w)]
            names += [f"sin{k}", f"cos{k}"]
    cfg = net_config or NetConfig(hidden_layers=2, width=16, tau=env.bound + 1.0, out_low=-env.horizon,
                                  out_high=float(env.horizon), init_output=0.0)
    for i in range(n_nets):
        net = ReluNetwork.initialize(x.shape[1], cfg, int(rng.integers(2 ** 31)))
        net.weights[-1] = rng.normal(size=net.weights[-1].shape)
        net.biases[-1] = rng.normal(size=1)
        rows.append(net(x))
        names.append(f"relu{i}")
    return ProbeClass(np.array(rows), tuple(names))


def kappa_profile(mdp, target, behavior, eta, probes: ProbeClass):
    """Horizon sums of sqrt(1 + restricted chi^2) against behavior and eta.

    Returns ``(kappa1, kappa2, rows)`` where rows hold the per-step
    diagnostics. Values are lower bounds over the probe surrogate.
    """
    q_pi = occupancies(mdp, target)
    q_b = occupancies(mdp, behavior)
    eta = np.asarray(eta, dtype=float)
    kappa1 = kappa2 = 0.0
    rows = []
    for h in range(mdp.horizon):
        for kind, ref in (("kappa1", q_b[h]), ("kappa2", eta[h])):
            chi_r = restricted_chi_square(q_pi[h].ravel(), ref.ravel(), probes)
            try:
                chi_p = pearson_chi_square(q_pi[h].ravel(), ref.ravel())
            except SupportError:
                chi_p = float("inf")
            term = np.sqrt(1.0 + max(chi_r, -1.0))
            if kind == "kappa1":
                kappa1 += term
            else:
                kappa2 += term
            rows.append({"h": h + 1, "kind": kind, "chi2_restricted": chi_r, "chi2_pearson": chi_p,
                         "probe_count": len(probes)})
    return float(kappa1), float(kappa2), rows
