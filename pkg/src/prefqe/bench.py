"""Config-driven sweeps over (D, K_HF, K, seed) with oracle comparisons,
append-only CSV records, resumption, and log-log decay slopes."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import multiprocessing
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .divergence import default_probes, kappa_profile
from .envs import (EnvConfig, generate_preference_dataset, generate_transition_dataset, make_embedded_mdp,
                   occupancy_eta, uniform_eta)
from .errors import ConfigError, SizeError
from .fqe import Q_OPT, PipelineConfig, q_net_config, run_pipeline
from .mdp import Policy, TabularMdp, dumps_17g, exact_policy_value
from .relu_net import NetConfig, OptimizerConfig, paper_scaling
from .reward_mle import REWARD_NET, REWARD_OPT, fit_reward

RECORD_FIELDS = ["seed", "K", "K_HF", "D", "d", "H", "v_hat", "v_true", "abs_err", "reward_mse_mean",
                 "kappa1", "kappa2", "cell_hash"]
DIAGNOSTIC_FIELDS = ["h", "kind", "chi2_restricted", "chi2_pearson", "probe_count"]
WORKERS_ENV = "PREFQE_WORKERS"


# -- configuration ------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    env: dict = field(default_factory=dict)
    target: dict = field(default_factory=lambda: {"kind": "softmax_random", "seed": 1})
    behavior: dict = field(default_factory=lambda: {"kind": "uniform"})
    eta: str = "behavior"  # "behavior", "target" or "uniform"
    K: list = field(default_factory=list)
    K_HF: list = field(default_factory=list)
    D: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    preset: str = "default"  # "default" or "paper_scaling"
    smoothness: float = 2.0
    q_mode: str = "net"
    reward_source: str = "learned"
    reward_net: dict = field(default_factory=dict)
    reward_opt: dict = field(default_factory=dict)
    q_net: dict = field(default_factory=dict)
    q_opt: dict = field(default_factory=dict)
    diagnostics: bool = True
    probe_nets: int = 64
    output_dir: str = "results"

    def content_hash(self) -> str:
        """Hash of everything that affects results (not seeds or output location)."""
        body = {k: v for k, v in asdict(self).items() if k not in ("seeds", "output_dir")}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def env_config(self, D) -> EnvConfig:
        return EnvConfig.from_dict({**self.env, "ambient_dim": int(D)})


def _line_of(text, key):
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _policy_spec_ok(spec):
    return isinstance(spec, dict) and spec.get("kind") in ("uniform", "softmax_random", "table")


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    """Parse and validate a JSON config; errors carry the offending line."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", line=1)
    known = set(ExperimentConfig.__dataclass_fields__)
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown field {key!r}", line=_line_of(text, key))
    if "grid" in raw:
        raise ConfigError("put K, K_HF and D at the top level", line=_line_of(text, "grid"))

    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}", line=_line_of(text, key))

    for key in ("K", "K_HF", "D"):
        vals = raw.get(key, [])
        if not isinstance(vals, list) or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0
                                                 for v in vals):
            fail(key, "must be a list of positive integers")
    seeds = raw.get("seeds", [])
    if not isinstance(seeds, list) or not all(isinstance(s, int) and s >= 0 for s in seeds):
        fail("seeds", "must be a list of nonnegative integers")
    if len(set(seeds)) != len(seeds):
        fail("seeds", "seeds must be distinct")
    for key in ("target", "behavior"):
        if key in raw and not _policy_spec_ok(raw[key]):
            fail(key, "expected {\"kind\": \"uniform\" | \"softmax_random\" | \"table\", ...}")
    checks = {"eta": ("behavior", "target", "uniform"), "preset": ("default", "paper_scaling"),
              "q_mode": ("net", "tabular"), "reward_source": ("learned", "true")}
    for key, allowed in checks.items():
        if key in raw and raw[key] not in allowed:
            fail(key, f"must be one of {', '.join(allowed)}")
    try:
        cfg = ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc), line=1) from None
    if base_dir is not None and not Path(cfg.output_dir).is_absolute():
        cfg = replace(cfg, output_dir=str(Path(base_dir) / cfg.output_dir))
    # build every sub-object once so bad values surface before any work
    for D in cfg.D:
        try:
            env_cfg = cfg.env_config(D)
        except (TypeError, ValueError) as exc:
            fail("env" if "env" in raw else "D", str(exc))
        for key in ("target", "behavior"):
            try:
                make_policy(getattr(cfg, key), env_cfg.horizon, env_cfg.num_states, env_cfg.num_actions)
            except (TypeError, ValueError, KeyError) as exc:
                fail(key, str(exc))
    for key, cls in (("reward_net", NetConfig), ("q_net", NetConfig), ("reward_opt", OptimizerConfig),
                     ("q_opt", OptimizerConfig)):
        try:
            cls(**getattr(cfg, key))
        except (TypeError, ValueError) as exc:
            fail(key, str(exc))
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def make_policy(spec, H, S, A) -> Policy:
    kind = spec["kind"]
    if kind == "uniform":
        return Policy.uniform(H, S, A)
    if kind == "softmax_random":
        return Policy.softmax_random(H, S, A, seed=spec.get("seed", 0), temperature=spec.get("temperature", 1.0))
    pol = Policy.from_dict(spec)
    if pol.horizon != H or pol.step(1).shape != (S, A):
        raise ValueError(f"policy table must be {H} x ({S}, {A})")
    return pol


# -- one sweep cell ------------------------------------------------------

def cell_hash(config_hash, D, K_HF, K) -> str:
    key = f"{config_hash}|D={D}|K_HF={K_HF}|K={K}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def _sub_seed(seed, *parts) -> int:
    """Integer seed derived from (seed, cell coordinates)."""
    digest = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int(np.random.SeedSequence([int(seed), int.from_bytes(digest[:4], "little")]).generate_state(1)[0])


@dataclass
class _Setup:
    env: object
    target: Policy
    behavior: Policy
    eta: np.ndarray
    kappa1: float
    kappa2: float
    diagnostics: list


def build_setup(cfg: ExperimentConfig, D) -> _Setup:
    env = make_embedded_mdp(cfg.env_config(D))
    H, S, A = env.horizon, env.num_states, env.num_actions
    target = make_policy(cfg.target, H, S, A)
    behavior = make_policy(cfg.behavior, H, S, A)
    eta = {"behavior": lambda: occupancy_eta(env, behavior), "target": lambda: occupancy_eta(env, target),
           "uniform": lambda: uniform_eta(env)}[cfg.eta]()
    k1 = k2 = float("nan")
    rows = []
    if cfg.diagnostics:
        probes = default_probes(env, seed=env.config.seed, n_nets=cfg.probe_nets)
        k1, k2, rows = kappa_profile(env.mdp, target, behavior, eta, probes)
    return _Setup(env, target, behavior, eta, k1, k2, rows)


def _pipeline_config(cfg: ExperimentConfig, env, K, K_HF, seed) -> PipelineConfig:
    H, d = env.horizon, env.intrinsic_dim
    if cfg.preset == "paper_scaling":
        reward_net, _ = paper_scaling(K_HF, d, cfg.smoothness, bound=env.bound, out_low=0.0, out_high=1.0,
                                      feature_dim=env.config.feature_dim)
        q_net, _ = paper_scaling(K, d, cfg.smoothness, bound=env.bound, out_high=float(H))
    else:
        reward_net, q_net = REWARD_NET, q_net_config(H)
    reward_net = replace(reward_net, **cfg.reward_net)
    q_net = replace(q_net, **cfg.q_net)
    reward_opt = replace(REWARD_OPT, **cfg.reward_opt, seed=seed)
    q_opt = replace(Q_OPT, **cfg.q_opt)
    return PipelineConfig(q_mode=cfg.q_mode, reward_source=cfg.reward_source, reward_net=reward_net,
                          reward_opt=reward_opt, q_net=q_net, q_opt=q_opt, seed=seed)


def run_group(cfg: ExperimentConfig, setup: _Setup, config_hash, D, K_HF, seed, Ks):
    """All K values for one (D, K_HF, seed); the reward fit is shared.

    Yields ``(K, record | None, runtime, error | None)`` per K.
    """
    env = setup.env
    learned = None
    prefs = None
    for K in Ks:
        start = time.perf_counter()
        try:
            pc = _pipeline_config(cfg, env, K, K_HF, seed)
            if cfg.reward_source == "learned" and prefs is None:
                prefs = generate_preference_dataset(env, setup.eta, K_HF, _sub_seed(seed, config_hash, D, K_HF))
            # the reward fit depends only on (D, K_HF, seed)
            if learned is None and cfg.reward_source == "learned":
                learned = fit_reward(prefs, pc.reward_net, pc.reward_opt)
            transitions = generate_transition_dataset(env, setup.behavior, K,
                                                      _sub_seed(seed, config_hash, D, K_HF, K))
            report = run_pipeline(env, transitions, prefs, setup.target, pc, behavior=setup.behavior,
                                  eta=setup.eta, learned_reward=learned)
            mse = float(np.mean(report.reward_mse)) if report.reward_mse else float("nan")
            rec = {"seed": seed, "K": K, "K_HF": K_HF, "D": D, "d": env.intrinsic_dim, "H": env.horizon,
                   "v_hat": report.v_hat, "v_true": report.v_true, "abs_err": abs(report.v_hat - report.v_true),
                   "reward_mse_mean": mse, "kappa1": setup.kappa1, "kappa2": setup.kappa2,
                   "cell_hash": cell_hash(config_hash, D, K_HF, K)}
            yield K, rec, time.perf_counter() - start, None
        except Exception as exc:  # a failing cell must not stop the sweep
            yield K, None, time.perf_counter() - start, f"{type(exc).__name__}: {exc}"


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _worker(args):
    cfg, D, K_HF, seed, Ks, config_hash = args
    setup = _setup_cache(cfg, D)
    return [(D, K_HF, seed, K, rec, rt, err)
            for K, rec, rt, err in run_group(cfg, setup, config_hash, D, K_HF, seed, Ks)]


_SETUPS: dict = {}


def _setup_cache(cfg, D):
    key = (cfg.content_hash(), D)
    if key not in _SETUPS:
        _SETUPS[key] = build_setup(cfg, D)
    return _SETUPS[key]


def read_records(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        rec = {}
        for k, v in r.items():
            if k == "cell_hash":
                rec[k] = v
            elif k in ("seed", "K", "K_HF", "D", "d", "H"):
                rec[k] = int(v)
            else:
                rec[k] = float(v)
        out.append(rec)
    return out


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def run_experiment(config, workers=None, log=print) -> int:
    """Run every (D, K_HF, seed, K) cell not yet recorded.

    ``config`` is a path or an ExperimentConfig. Returns the exit status:
    0 when every cell succeeded, 1 when any cell failed.
    """
    cfg = load_config(config) if not isinstance(config, ExperimentConfig) else config
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_hash = cfg.content_hash()
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("config_hash") != config_hash:
            raise ConfigError(f"{out} holds records of a different configuration "
                              f"(hash {old.get('config_hash')} vs {config_hash})")
    manifest = {"config_hash": config_hash, "config": asdict(cfg),
                "started_at": time.strftime("%Y-%m-%dT%H:%M:%S")}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    records_path = out / "records.csv"
    done = set()
    if records_path.exists():
        done = {(r["cell_hash"], r["seed"]) for r in read_records(records_path)}
    else:
        with open(records_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(RECORD_FIELDS)
    timings_path = out / "timings.csv"
    failures_path = out / "failures.csv"

    for D in cfg.D:
        setup = _setup_cache(cfg, D)
        (out / f"env_D{D}.json").write_text(dumps_17g({
            "mdp": setup.env.mdp.to_dict(), "target": setup.target.to_dict(), "D": D}) + "\n")
        if cfg.diagnostics:
            with open(out / f"diagnostics_D{D}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(DIAGNOSTIC_FIELDS)
                for row in setup.diagnostics:
                    w.writerow([_fmt(row[k]) for k in DIAGNOSTIC_FIELDS])

    tasks = []
    for D in cfg.D:
        for K_HF in cfg.K_HF:
            for seed in cfg.seeds:
                Ks = [K for K in cfg.K if (cell_hash(config_hash, D, K_HF, K), seed) not in done]
                if Ks:
                    tasks.append((cfg, D, K_HF, seed, Ks, config_hash))

    n_workers = worker_count() if workers is None else workers
    failed = 0
    pool = multiprocessing.get_context("spawn").Pool(n_workers) if n_workers > 1 and len(tasks) > 1 else None
    try:
        results = pool.imap(_worker, tasks) if pool else map(_worker, tasks)
        for group in results:
            with open(records_path, "a", newline="") as fh, open(timings_path, "a", newline="") as th:
                w, tw = csv.writer(fh, lineterminator="\n"), csv.writer(th, lineterminator="\n")
                for D, K_HF, seed, K, rec, rt, err in group:
                    if rec is not None:
                        w.writerow([_fmt(rec[k]) for k in RECORD_FIELDS])
                    tw.writerow([cell_hash(config_hash, D, K_HF, K), seed, f"{rt:.3f}"])
                    if err is not None:
                        failed += 1
                        with open(failures_path, "a", newline="") as ff:
                            csv.writer(ff, lineterminator="\n").writerow([D, K_HF, K, seed, err])
                        log(f"cell D={D} K_HF={K_HF} K={K} seed={seed} failed: {err}")
    finally:
        if pool:
            pool.close()
            pool.join()
    return 1 if failed else 0


# -- analysis -----------------------------------------------------------

@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    band: tuple  # bootstrap percentile interval for the slope
    x: tuple
    median_y: tuple

    def excludes_zero(self) -> bool:
        return self.band[0] > 0 or self.band[1] < 0


def _ols(lx, ly):
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(slope), float(intercept)


def fit_decay_slope(records, x_axis="K", y="abs_err", n_boot=2000, level=0.95, seed=0) -> SlopeFit:
    """OLS of log median-y on log x, with a bootstrap over seeds.

    ``records`` are dicts with the x column, the y column and ``seed``.
    Each bootstrap replicate resamples the seed set with replacement and
    recomputes the per-x medians.
    """
    x_col = {"K": "K", "KHF": "K_HF", "K_HF": "K_HF"}[x_axis]
    y_col = {"abs_err": "abs_err", "reward_mse": "reward_mse_mean"}.get(y, y)
    xs = sorted({r[x_col] for r in records})
    if len(xs) < 3:
        raise SizeError(f"need at least 3 distinct {x_col} values, got {len(xs)}")
    table = {}
    for r in records:
        table.setdefault(r[x_col], {})[r["seed"]] = float(r[y_col])
    seeds = sorted(set.intersection(*(set(table[x]) for x in xs)))
    for x in xs:
        if len(table[x]) < 5:
            raise SizeError(f"need at least 5 seeds at {x_col}={x}, got {len(table[x])}")
    if len(seeds) < 5:
        raise SizeError(f"need at least 5 seeds shared by every {x_col} value")
    Y = np.array([[table[x][s] for s in seeds] for x in xs])
    if np.any(~np.isfinite(Y)) or np.any(Y <= 0):
        raise ValueError(f"{y_col} must be positive and finite for a log-log fit")
    lx = np.log(np.array(xs, dtype=float))
    med = np.median(Y, axis=1)
    slope, intercept = _ols(lx, np.log(med))
    rng = np.random.default_rng(seed)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, len(seeds), len(seeds))
        boots[b] = _ols(lx, np.log(np.median(Y[:, idx], axis=1)))[0]
    alpha = (1 - level) / 2
    band = (float(np.quantile(boots, alpha)), float(np.quantile(boots, 1 - alpha)))
    return SlopeFit(slope, intercept, band, tuple(xs), tuple(map(float, med)))


def verify_records(records_path, tol=1e-10) -> list:
    """Recompute v_true from the serialized environments next to the CSV.

    Returns a list of problems; empty means every record checks out.
    """
    base = Path(records_path).parent
    problems, cache = [], {}
    for i, rec in enumerate(read_records(records_path), 2):
        D = rec["D"]
        if D not in cache:
            blob = json.loads((base / f"env_D{D}.json").read_text())
            cache[D] = exact_policy_value(TabularMdp.from_dict(blob["mdp"]), Policy.from_dict(blob["target"]))
        v = cache[D]
        if not abs(v - rec["v_true"]) <= tol:
            problems.append(f"line {i}: stored v_true {rec['v_true']!r} != recomputed {v!r}")
        if not abs(abs(rec["v_hat"] - rec["v_true"]) - rec["abs_err"]) <= tol:
            problems.append(f"line {i}: abs_err does not equal |v_hat - v_true|")
    return problems
