"""Experiment harness: validated configs, replication orchestration, outputs.

Five experiment kinds:

  mechanism_selftest   noise-sampler moment checks plus closed-form privacy
                       certificates for every oracle channel scale.
  coverage_audit       repeated oracle fits on a finite-context env; audits
                       the pointwise confidence bound on the full grid, and
                       optionally extends to the elimination policy to audit
                       retention/nestedness invariants.
  mad_curve            mean-absolute-deviation error versus sample size for
                       the layered oracle and/or the baseline estimators.
  mse_lower_bound      directional mean-squared error versus sample size on
                       the rare-direction design, worst case over the
                       two-point hypothesis class.
  regret_curve         cumulative regret versus horizon for the elimination
                       policy and baseline policies on a shared env family.

Outputs per run: ``results.csv`` (one row per replication cell),
``summary.json`` (config hash, aggregates, fitted slopes, gate booleans) and,
for regret experiments, per-period traces of replication 0.  Outputs contain
no timestamps: identical config and seed give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import mechanisms
from .analysis import (
    coverage_audit,
    design_mad_exact,
    directional_mse,
    fit_loglog_slope,
)
from .baselines import (
    RidgeEpochFitter,
    SuffStatConfig,
    input_perturb_fit,
    suffstat_fit,
    suffstat_private_policy,
)
from .elimination import (
    EpochSchedule,
    ExactLinearTable,
    InactiveTable,
    RegretTrace,
    Table,
    run_elimination,
)
from .environments import (
    HardDesign,
    LinearEnv,
    TwoPointDesign,
    hard_design_stream,
    mirror_env,
    random_finite_env,
    realize_reward_batch,
)
from .oracle import LayeredOracle, OracleConfig, OracleEstimate
from .partition import LayerParams

__all__ = [
    "ConfigError",
    "GateFailure",
    "ExperimentConfig",
    "LplrEpochFitter",
    "ExactTableFitter",
    "build_env",
    "build_design",
    "build_layer_params",
    "run_experiment",
    "config_hash",
]

_KINDS = ("mechanism_selftest", "coverage_audit", "mad_curve",
          "mse_lower_bound", "regret_curve")
_ESTIMATORS = ("lplr", "ip_ridge", "ip_bias_corrected", "suffstat")
_POLICIES = ("lplr_elimination", "suffstat_ucb", "nonprivate_ridge_elim",
             "exact_oracle")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


class GateFailure(RuntimeError):
    """An acceptance gate failed in selftest mode (CLI exit code 2)."""


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.12g}"
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def config_hash(normalized: dict) -> str:
    blob = json.dumps(normalized, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _opt(d: dict, key: str, default=None):
    return d[key] if key in d else default


_TOP_KEYS = {
    "mechanism_selftest": {"experiment", "seed", "label", "n_draws",
                           "allow_zero_noise"},
    "coverage_audit": {"experiment", "seed", "label", "replications", "alpha",
                       "env", "oracle", "n_per_layer", "policy_check",
                       "gates", "allow_zero_noise"},
    "mad_curve": {"experiment", "seed", "label", "replications", "alpha",
                  "estimators", "design", "oracle", "n_grid", "theta",
                  "gates", "allow_zero_noise"},
    "mse_lower_bound": {"experiment", "seed", "label", "replications",
                        "alpha", "design", "estimators", "n_grid", "gates",
                        "allow_zero_noise"},
    "regret_curve": {"experiment", "seed", "label", "replications", "alpha",
                     "env", "policies", "T_grid", "gates",
                     "allow_zero_noise"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``normalized`` feeds the hash."""

    kind: str
    seed: int
    label: str
    replications: int
    alpha: float
    allow_zero_noise: bool
    normalized: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _require(isinstance(raw, dict), "config must be a JSON object")
        kind = _opt(raw, "experiment")
        _require(kind in _KINDS, f"experiment must be one of {_KINDS}")
        unknown = set(raw) - _TOP_KEYS[kind]
        _require(not unknown, f"unknown config keys: {sorted(unknown)}")
        seed = _opt(raw, "seed", 0)
        _require(isinstance(seed, int) and seed >= 0,
                 "seed must be a nonnegative integer")
        label = _opt(raw, "label", kind)
        _require(isinstance(label, str) and label != "", "label must be a "
                 "nonempty string")
        reps = _opt(raw, "replications", 1)
        _require(isinstance(reps, int) and reps >= 1,
                 "replications must be a positive integer")
        alpha = float(_opt(raw, "alpha", 1.0))
        _require(0.0 < alpha <= 1.0, "alpha must lie in (0, 1]")
        allow_zero = bool(_opt(raw, "allow_zero_noise", False))
        normalized = _normalize(kind, raw, seed, label, reps, alpha,
                                allow_zero)
        return cls(kind=kind, seed=seed, label=label, replications=reps,
                   alpha=alpha, allow_zero_noise=allow_zero,
                   normalized=normalized)

    @property
    def hash(self) -> str:
        return config_hash(self.normalized)

    def section(self, key: str, default=None):
        return self.normalized.get(key, default)


def _normalize(kind, raw, seed, label, reps, alpha, allow_zero) -> dict:
    out: dict[str, Any] = {
        "experiment": kind, "seed": seed, "label": label,
        "replications": reps, "alpha": alpha,
        "allow_zero_noise": allow_zero,
    }
    gates = _opt(raw, "gates", {})
    _require(isinstance(gates, dict), "gates must be an object")
    out["gates"] = {k: gates[k] for k in sorted(gates)}
    if kind == "mechanism_selftest":
        n_draws = _opt(raw, "n_draws", 100_000)
        _require(isinstance(n_draws, int) and n_draws >= 10_000,
                 "n_draws must be an integer >= 10^4")
        out["n_draws"] = n_draws
        return out
    if kind == "coverage_audit":
        out["env"] = _check_env_spec(_opt(raw, "env"))
        out["oracle"] = _check_oracle_spec(_opt(raw, "oracle"))
        n = _opt(raw, "n_per_layer")
        _require(isinstance(n, int) and n >= 1,
                 "n_per_layer must be a positive integer")
        out["n_per_layer"] = n
        pc = _opt(raw, "policy_check")
        if pc is not None:
            _require(isinstance(pc, dict) and
                     isinstance(_opt(pc, "T"), int) and pc["T"] >= 2 and
                     isinstance(_opt(pc, "n0"), int) and pc["n0"] >= 1,
                     "policy_check needs integer T >= 2 and n0 >= 1")
            out["policy_check"] = {"T": pc["T"], "n0": pc["n0"]}
        return out
    if kind == "mad_curve":
        ests = _opt(raw, "estimators")
        _require(isinstance(ests, list) and ests and
                 all(e in _ESTIMATORS for e in ests),
                 f"estimators must be a nonempty subset of {_ESTIMATORS}")
        out["estimators"] = list(ests)
        out["design"] = _check_design_spec(_opt(raw, "design"))
        if "lplr" in ests:
            out["oracle"] = _check_oracle_spec(_opt(raw, "oracle"))
        out["n_grid"] = _check_grid(_opt(raw, "n_grid"), "n_grid")
        theta = _opt(raw, "theta")
        if theta is not None:
            out["theta"] = [float(v) for v in theta]
        return out
    if kind == "mse_lower_bound":
        out["design"] = _check_design_spec(_opt(raw, "design"))
        ests = _opt(raw, "estimators")
        _require(isinstance(ests, list) and ests and
                 all(e in _ESTIMATORS and e != "lplr" for e in ests),
                 "estimators must be parameter-vector estimators")
        out["estimators"] = list(ests)
        out["n_grid"] = _check_grid(_opt(raw, "n_grid"), "n_grid")
        return out
    # regret_curve
    out["env"] = _check_env_spec(_opt(raw, "env"))
    pols = _opt(raw, "policies")
    _require(isinstance(pols, list) and pols, "policies must be a nonempty "
             "list")
    out["policies"] = [_check_policy_spec(p) for p in pols]
    names = [p["name"] for p in out["policies"]]
    _require(len(set(names)) == len(names), "policy names must be unique")
    out["T_grid"] = _check_grid(_opt(raw, "T_grid"), "T_grid")
    return out


def _check_policy_spec(p) -> dict:
    _require(isinstance(p, dict) and _opt(p, "name") in _POLICIES,
             f"each policy needs a name in {_POLICIES}")
    name = p["name"]
    out: dict[str, Any] = {"name": name}
    if name == "lplr_elimination":
        out["oracle"] = _check_oracle_spec(_opt(p, "oracle"))
    elif name == "suffstat_ucb":
        conf = _opt(p, "config", {})
        allowed = {"lambda_reg", "bonus_scale", "noise_bonus_scale",
                   "zero_noise"}
        _require(isinstance(conf, dict) and set(conf) <= allowed,
                 f"suffstat_ucb config keys must lie in {sorted(allowed)}")
        out["config"] = {k: conf[k] for k in sorted(conf)}
    else:
        if name == "nonprivate_ridge_elim":
            for key in ("lambda_reg", "bonus_scale"):
                if key in p:
                    _require(isinstance(p[key], (int, float)) and
                             float(p[key]) > 0.0,
                             f"policy.{key} must be a positive number")
                    out[key] = float(p[key])
        if "n0" in p:
            _require(isinstance(p["n0"], int) and p["n0"] >= 1,
                     "policy.n0 must be a positive integer")
            out["n0"] = p["n0"]
    extra = set(p) - set(out)
    _require(not extra, f"unknown keys for policy {name}: {sorted(extra)}")
    return out


def _check_grid(grid, name) -> list[int]:
    _require(isinstance(grid, list) and len(grid) >= 1 and
             all(isinstance(v, int) and v >= 1 for v in grid) and
             grid == sorted(grid),
             f"{name} must be an ascending list of positive integers")
    return list(grid)


def _check_env_spec(spec) -> dict:
    _require(isinstance(spec, dict), "env must be an object")
    kind = _opt(spec, "kind")
    _require(kind in ("mirror", "case2_mirror", "random"),
             "env.kind must be mirror, case2_mirror or random")
    noise = _opt(spec, "noise", "binary")
    _require(noise in ("binary", "uniform", "none"), "env.noise invalid")
    out = {"kind": kind, "noise": noise}
    if kind == "mirror":
        for key in ("c1", "c2"):
            _require(isinstance(_opt(spec, key), (int, float)),
                     f"env.{key} must be a number")
            out[key] = float(spec[key])
        out["theta"] = [float(v) for v in _opt(spec, "theta", [])]
        _require(len(out["theta"]) == 2, "mirror env needs a 2-vector theta")
    elif kind == "case2_mirror":
        _require(isinstance(_opt(spec, "c"), (int, float)) and spec["c"] >= 0,
                 "env.c must be a nonnegative number")
        out["c"] = float(spec["c"])
        out["theta"] = [float(v) for v in _opt(spec, "theta", [])]
        _require(len(out["theta"]) == 2,
                 "case2_mirror env needs a 2-vector theta")
    else:
        for key in ("n_contexts", "A", "d"):
            _require(isinstance(_opt(spec, key), int) and spec[key] >= 1,
                     f"env.{key} must be a positive integer")
            out[key] = spec[key]
        out["env_seed"] = int(_opt(spec, "env_seed", 0))
    extra = set(spec) - set(out)
    _require(not extra, f"unknown env keys: {sorted(extra)}")
    return out


def _check_design_spec(spec) -> dict:
    _require(isinstance(spec, dict), "design must be an object")
    kind = _opt(spec, "kind")
    if kind == "two_point":
        pts = _opt(spec, "points")
        probs = _opt(spec, "probs", [0.5, 0.5])
        _require(isinstance(pts, list) and len(pts) == 2,
                 "two_point design needs 2 support points")
        out = {"kind": kind,
               "points": [[float(v) for v in p] for p in pts],
               "probs": [float(v) for v in probs]}
    else:
        _require(kind in ("mse_thm1", "mad_thm2", "case1", "case2"),
                 "design.kind invalid")
        out = {"kind": kind}
        if "c" in spec:
            _require(isinstance(spec["c"], (int, float)) and spec["c"] >= 0,
                     "design.c must be nonnegative")
            out["c"] = float(spec["c"])
    extra = set(spec) - set(out)
    _require(not extra, f"unknown design keys: {sorted(extra)}")
    return out


def _check_oracle_spec(spec) -> dict:
    _require(isinstance(spec, dict), "oracle must be an object")
    out: dict[str, Any] = {}
    for key, lo in (("d", 1), ("T", 2)):
        _require(isinstance(_opt(spec, key), int) and spec[key] >= lo,
                 f"oracle.{key} must be an integer >= {lo}")
        out[key] = spec[key]
    for key in ("beta", "delta"):
        val = _opt(spec, key)
        if key == "delta" and val == "1/T^2":
            out[key] = val
            continue
        _require(isinstance(val, (int, float)) and 0.0 < float(val) < 1.0,
                 f"oracle.{key} must lie in (0, 1)")
        out[key] = float(val)
    if _opt(spec, "paper_mode", False):
        out["paper_mode"] = True
    else:
        for key in ("kappa1", "kappa1p", "kappa2", "kappa3"):
            _require(isinstance(_opt(spec, key), (int, float)) and
                     float(spec[key]) > 0.0,
                     f"oracle.{key} must be a positive number")
            out[key] = float(spec[key])
    if "n0" in spec:
        _require(isinstance(spec["n0"], int) and spec["n0"] >= 1,
                 "oracle.n0 must be a positive integer")
        out["n0"] = spec["n0"]
    extra = set(spec) - set(out)
    _require(not extra, f"unknown oracle keys: {sorted(extra)}")
    return out


# ---------------------------------------------------------------------------
# Spec builders
# ---------------------------------------------------------------------------

def build_env(spec: dict, T: int | None = None) -> LinearEnv:
    """Materialize an env spec; case2_mirror scales its gap with the horizon."""
    kind = spec["kind"]
    if kind == "mirror":
        return mirror_env(spec["c1"], spec["c2"], np.asarray(spec["theta"]),
                          noise=spec["noise"])
    if kind == "case2_mirror":
        if T is None:
            raise ConfigError("case2_mirror env needs the horizon T")
        dlt = min(1.0, spec["c"] / math.sqrt(T))
        z = math.sqrt(1.0 + dlt)
        return mirror_env(1.0 / z, math.sqrt(dlt) / z,
                          np.asarray(spec["theta"]), noise=spec["noise"],
                          name=f"case2_mirror_T{T}")
    rng = np.random.default_rng(spec["env_seed"])
    return random_finite_env(spec["n_contexts"], spec["A"], spec["d"], rng,
                             noise=spec["noise"])


def build_design(spec: dict, n: int, alpha: float):
    if spec["kind"] == "two_point":
        return TwoPointDesign(points=np.asarray(spec["points"]),
                              probs=np.asarray(spec["probs"]))
    return HardDesign(kind=spec["kind"], n=n, alpha=alpha,
                      c=spec.get("c"))


def build_layer_params(spec: dict, alpha: float, T: int | None = None) -> LayerParams:
    geom_T = T if T is not None else spec["T"]
    delta = spec["delta"]
    if delta == "1/T^2":
        delta = 1.0 / geom_T ** 2
    if spec.get("paper_mode"):
        return LayerParams.paper_mode(d=spec["d"], T=geom_T,
                                      beta=spec["beta"], alpha=alpha,
                                      delta=delta)
    return LayerParams(d=spec["d"], T=geom_T, beta=spec["beta"], alpha=alpha,
                       delta=delta, kappa1=spec["kappa1"],
                       kappa1p=spec["kappa1p"], kappa2=spec["kappa2"],
                       kappa3=spec["kappa3"])


# ---------------------------------------------------------------------------
# Epoch fitters for the elimination policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LplrEpochFitter:
    """Per-epoch layered private oracles, one per action.

    An epoch of nominal length n_tau funds per-layer batches of
    n_tau // (2 d); epochs shorter than 2 d yield degenerate all-inactive
    tables."""

    params: LayerParams
    zero_noise: bool = False

    def n_budget(self, n_tau: int) -> int:
        d = self.params.d
        return 2 * d * (n_tau // (2 * d))

    def fit(self, features, rewards, chosen, seed) -> list[Table]:
        A = features.shape[1]
        d = self.params.d
        n = rewards.shape[0] // (2 * d)
        if n == 0:
            return [InactiveTable(self.params)] * A
        seeds = seed.spawn(A)
        tables: list[Table] = []
        for a in range(A):
            config = OracleConfig(self.params, n, zero_noise=self.zero_noise)
            oracle = LayeredOracle(config, seeds[a])
            tables.append(oracle.run_stream(
                features[:, a, :], rewards, chosen == a))
        return tables


@dataclass(frozen=True)
class ExactTableFitter:
    """Ground-truth tables every epoch (exactness tests only)."""

    theta: np.ndarray

    def n_budget(self, n_tau: int) -> int:
        return 0

    def fit(self, features, rewards, chosen, seed) -> list[Table]:
        return [ExactLinearTable(np.asarray(self.theta, dtype=float))] \
            * features.shape[1]


# ---------------------------------------------------------------------------
# Replication orchestration
# ---------------------------------------------------------------------------

def _map_jobs(jobs: list[Callable[[], Any]], threads: int) -> list[Any]:
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(job) for job in jobs]
        return [f.result() for f in futures]


def _rep_seed(base: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=[base, *path])


# ---------------------------------------------------------------------------
# mechanism_selftest
# ---------------------------------------------------------------------------

def _moment_checks(n_draws: int, seed: int) -> list[dict]:
    checks: list[dict] = []

    def add(name, statistic, threshold, ok):
        checks.append({"name": name, "statistic": float(statistic),
                       "threshold": float(threshold), "ok": bool(ok)})

    rng = np.random.default_rng(_rep_seed(seed, 0))
    for scale in (0.5, 1.0, 3.0):
        x = mechanisms.sample_laplace(n_draws, scale, rng)
        mean_se = math.sqrt(2.0) * scale / math.sqrt(n_draws)
        z_mean = x.mean() / mean_se
        var_se = math.sqrt(20.0) * scale * scale / math.sqrt(n_draws)
        z_var = (x.var(ddof=1) - 2.0 * scale * scale) / var_se
        add(f"laplace_scale{scale}_mean", z_mean, 5.0, abs(z_mean) <= 5.0)
        add(f"laplace_scale{scale}_var", z_var, 5.0, abs(z_var) <= 5.0)
    count, scale = 7, 1.0
    sums = mechanisms.sum_laplace(count, scale, (n_draws,), rng)
    var_true = count * 2.0 * scale * scale
    mean_se = math.sqrt(var_true / n_draws)
    z = sums.mean() / mean_se
    add("sum_laplace_mean", z, 5.0, abs(z) <= 5.0)
    # Var of the sample variance ~ (mu4 - sigma^4)/N for a sum of `count`
    # Laplace(scale) terms: mu4 - sigma^4 = (12 count + 8 count^2) scale^4.
    var_of_var = (12.0 * count + 8.0 * count * count) * scale ** 4 / n_draws
    z_var = (sums.var(ddof=1) - var_true) / math.sqrt(var_of_var)
    add("sum_laplace_var", z_var, 5.0, abs(z_var) <= 5.0)

    wish_draws = max(10_000, n_draws // 10)
    for d, alpha in ((1, 1.0), (2, 1.0), (3, 0.5)):
        m = d + 1
        v_mat = (mechanisms.WISHART_SCALE / alpha) * np.eye(d)
        acc = np.zeros((d, d))
        for _ in range(wish_draws):
            acc += mechanisms.sample_wishart(d, m, v_mat, rng)
        emp = acc / wish_draws
        expected = m * v_mat
        sd = np.sqrt(m * (np.outer(np.diag(v_mat), np.diag(v_mat))
                          + v_mat ** 2))
        z_mat = (emp - expected) / (sd / math.sqrt(wish_draws))
        z_max = float(np.abs(z_mat).max())
        add(f"wishart_d{d}_alpha{alpha}_mean", z_max, 5.0, z_max <= 5.0)

    d, alpha, mag = 2, 1.0, 3.0
    acc = np.zeros((d, d))
    for _ in range(wish_draws):
        acc += mechanisms.centered_wishart_noise(d, alpha, mag, rng)
    emp = acc / wish_draws
    entry_sd = mag * (mechanisms.WISHART_SCALE / alpha) * \
        math.sqrt((d + 1) * 2.0)
    threshold = 5.0 * d * entry_sd / math.sqrt(wish_draws)
    op = float(np.abs(np.linalg.eigvalsh((emp + emp.T) / 2.0)).max())
    add("centered_wishart_mean_opnorm", op, threshold, op <= threshold)

    pooled = mechanisms.sum_centered_wishart(d, alpha, mag, 5, rng)
    singles = sum(mechanisms.centered_wishart_noise(d, alpha, mag, rng)
                  for _ in range(5))
    scale_ok = float(np.abs(pooled).max()) < 50 * entry_sd * 5 and \
        float(np.abs(singles).max()) < 50 * entry_sd * 5
    add("sum_centered_wishart_scale", float(np.abs(pooled).max()),
        50 * entry_sd * 5, scale_ok)
    return checks


def _certificate_checks() -> list[dict]:
    checks: list[dict] = []
    for d in (1, 2, 3):
        for gamma in (2.0, 2.3, 3.25, 4.0):
            for k in (0, 1, 2, 3):
                for alpha in (0.2, 1.0):
                    for s_hat in (0.04, 0.25, 1.0):
                        certs = mechanisms.oracle_channel_certificates(
                            d=d, gamma=gamma, k=k, alpha=alpha, s_hat=s_hat)
                        for cert in certs:
                            checks.append({
                                "name": f"cert_d{d}_g{gamma}_k{k}_a{alpha}"
                                        f"_s{s_hat}_{cert.label}",
                                "statistic": float(cert.worst_ratio),
                                "threshold": float(cert.budget_bound),
                                "ok": bool(cert.ok),
                            })
    neg = mechanisms.verify_density_ratio(scale=0.9, sensitivity=1.0,
                                          alpha_target=1.0,
                                          label="negative_control")
    checks.append({"name": "negative_control_underscaled",
                   "statistic": float(neg.worst_ratio),
                   "threshold": float(neg.budget_bound),
                   "ok": bool(not neg.ok)})
    return checks


def _run_mechanism_selftest(cfg: ExperimentConfig, out_dir: Path,
                            threads: int) -> dict:
    checks = _moment_checks(cfg.section("n_draws"), cfg.seed)
    certs = _certificate_checks()
    rows = [(c["name"], c["statistic"], c["threshold"], c["ok"])
            for c in checks + certs]
    _write_csv(out_dir / "results.csv",
               ["check", "statistic", "threshold", "ok"], rows)
    gates = {
        "moments_ok": all(c["ok"] for c in checks),
        "certificates_ok": all(c["ok"] for c in certs),
    }
    return {
        "moment_checks": checks,
        "certificate_checks_total": len(certs),
        "certificate_failures": [c["name"] for c in certs if not c["ok"]],
        "gates": gates,
    }


# ---------------------------------------------------------------------------
# coverage_audit
# ---------------------------------------------------------------------------

def _coverage_rep(env: LinearEnv, params: LayerParams, n: int,
                  zero_noise: bool, ss: np.random.SeedSequence) -> OracleEstimate:
    stream_ss, oracle_ss = ss.spawn(2)
    rng = np.random.default_rng(stream_ss)
    total = 2 * params.d * n
    ctx = env.draw_contexts(total, rng)
    acts = rng.integers(env.n_actions, size=total)
    Phi = env.features[ctx, acts]
    Y = realize_reward_batch(env, env.f_star[ctx, acts], rng)
    oracle = LayeredOracle(OracleConfig(params, n, zero_noise=zero_noise),
                           oracle_ss)
    return oracle.run_stream(Phi, Y, np.ones(total, dtype=bool))


def _run_coverage_audit(cfg: ExperimentConfig, out_dir: Path, threads: int,
                        zero_noise: bool) -> dict:
    env = build_env(cfg.section("env"))
    params = build_layer_params(cfg.section("oracle"), cfg.alpha)
    n = cfg.section("n_per_layer")
    R = cfg.replications
    jobs = [
        (lambda ss=_rep_seed(cfg.seed, 0, rep):
         _coverage_rep(env, params, n, zero_noise, ss))
        for rep in range(R)
    ]
    estimates = _map_jobs(jobs, threads)
    grid = np.vstack([env.feature_grid(), np.zeros(env.d)])
    report = coverage_audit(estimates, env.theta_star, grid)
    rows = [("oracle", rep, report.ok[rep], report.max_violation[rep], "",
             "", "", "") for rep in range(R)]

    policy_summary = None
    pc = cfg.section("policy_check")
    if pc is not None:
        schedule = EpochSchedule(n0=pc["n0"], T=pc["T"])
        fitter = LplrEpochFitter(params, zero_noise=zero_noise)
        audits = []
        for rep in range(R):
            trace, audit = run_elimination(
                env, schedule, fitter, _rep_seed(cfg.seed, 1, rep),
                collect_audit=True, policy_name="lplr_elimination")
            audits.append((trace, audit))
            rows.append(("policy", rep, audit.ci_valid, "",
                         audit.retention_ok, audit.nested_ok,
                         audit.subopt_ok, trace.final_regret))
        valid = [a for _, a in audits if a.ci_valid]
        retention_violations = sum(not a.retention_ok for a in valid)
        nested_violations = sum(not a.nested_ok for a in valid)
        policy_summary = {
            "replications": R,
            "ci_valid_count": len(valid),
            "retention_violations": retention_violations,
            "nested_violations": nested_violations,
            "subopt_violations": sum(not a.subopt_ok for a in valid),
        }
    _write_csv(out_dir / "results.csv",
               ["block", "rep", "covered_or_valid", "max_violation",
                "retention_ok", "nested_ok", "subopt_ok", "final_regret"],
               rows)
    gates = {}
    min_cov = cfg.section("gates").get("min_coverage")
    if min_cov is not None:
        gates["coverage_ok"] = bool(report.coverage_rate >= min_cov)
    if policy_summary is not None:
        gates["policy_invariants_ok"] = bool(
            policy_summary["retention_violations"] == 0
            and policy_summary["nested_violations"] == 0)
    return {
        "coverage_rate": report.coverage_rate,
        "worst_violation": report.worst_violation,
        "policy": policy_summary,
        "gates": gates,
    }


# ---------------------------------------------------------------------------
# mad_curve
# ---------------------------------------------------------------------------

def _theta_candidates(cfg: ExperimentConfig, design) -> list[np.ndarray]:
    theta = cfg.section("theta")
    if theta is not None:
        return [np.asarray(theta, dtype=float)]
    cands = design.theta_candidates() if hasattr(design, "theta_candidates") \
        else None
    if cands is None:
        raise ConfigError("design has no canonical parameter candidates; "
                          "set theta explicitly")
    return cands


def _lplr_mad_rep(design, params: LayerParams, n: int, theta: np.ndarray,
                  zero_noise: bool, ss: np.random.SeedSequence) -> float:
    stream_ss, oracle_ss = ss.spawn(2)
    total = 2 * params.d * n
    Phi, Y = hard_design_stream(design, total, theta,
                                np.random.default_rng(stream_ss))
    est = LayeredOracle(OracleConfig(params, n, zero_noise=zero_noise),
                        oracle_ss).run_stream(Phi, Y,
                                              np.ones(total, dtype=bool))
    pts, probs = design.support()
    _, delta = est.evaluate(pts)
    return float(probs @ delta)


def _estimator_theta_hat(name: str, Phi, Y, alpha: float,
                         rng: np.random.Generator) -> np.ndarray:
    if name == "ip_ridge":
        return input_perturb_fit((Phi, Y), alpha, rng, estimator="ridge")
    if name == "ip_bias_corrected":
        return input_perturb_fit((Phi, Y), alpha, rng,
                                 estimator="bias_corrected")
    if name == "suffstat":
        return suffstat_fit((Phi, Y), alpha, rng)
    raise ConfigError(f"unknown estimator {name}")


def _run_mad_curve(cfg: ExperimentConfig, out_dir: Path, threads: int,
                   zero_noise: bool) -> dict:
    n_grid = cfg.section("n_grid")
    R = cfg.replications
    estimators = cfg.section("estimators")
    rows = []
    per_est: dict[str, list[float]] = {}
    for ei, est_name in enumerate(estimators):
        minimax_means: list[float] = []
        for ni, n in enumerate(n_grid):
            design = build_design(cfg.section("design"), n, cfg.alpha)
            cands = _theta_candidates(cfg, design)
            cand_means = []
            for ti, theta in enumerate(cands):
                if est_name == "lplr":
                    params = build_layer_params(cfg.section("oracle"),
                                                cfg.alpha)
                    jobs = [
                        (lambda ss=_rep_seed(cfg.seed, ei, ni, ti, rep):
                         _lplr_mad_rep(design, params, n, theta,
                                       zero_noise, ss))
                        for rep in range(R)
                    ]
                    vals = _map_jobs(jobs, threads)
                else:
                    def est_job(rep, theta=theta, n=n, design=design,
                                ei=ei, ni=ni, ti=ti, name=est_name):
                        rng = np.random.default_rng(
                            _rep_seed(cfg.seed, ei, ni, ti, rep))
                        Phi, Y = hard_design_stream(design, n, theta, rng)
                        if zero_noise:
                            theta_hat = np.linalg.solve(
                                Phi.T @ Phi + 1e-9 * np.eye(Phi.shape[1]),
                                Phi.T @ Y)
                        else:
                            theta_hat = _estimator_theta_hat(
                                name, Phi, Y, cfg.alpha, rng)
                        return design_mad_exact(design, theta_hat - theta)
                    jobs = [lambda rep=rep: est_job(rep) for rep in range(R)]
                    vals = _map_jobs(jobs, threads)
                for rep, v in enumerate(vals):
                    rows.append((est_name, ti, n, rep, v))
                cand_means.append(float(np.mean(vals)))
            minimax_means.append(max(cand_means))
        per_est[est_name] = minimax_means
    _write_csv(out_dir / "results.csv",
               ["estimator", "theta_idx", "n", "rep", "mad"], rows)
    summary: dict[str, Any] = {"grid": n_grid, "estimators": {}}
    xs = np.asarray(n_grid, dtype=float)
    for est_name, means in per_est.items():
        slope, intercept, r2 = fit_loglog_slope(xs, np.asarray(means))
        summary["estimators"][est_name] = {
            "mean_mad": means, "slope": slope, "intercept": intercept,
            "r_squared": r2,
        }
    ip_names = [e for e in estimators if e.startswith("ip_")]
    if len(ip_names) >= 2:
        best = np.min(np.asarray([per_est[e] for e in ip_names]), axis=0)
        slope, intercept, r2 = fit_loglog_slope(xs, best)
        summary["estimators"]["ip_best"] = {
            "mean_mad": best.tolist(), "slope": slope,
            "intercept": intercept, "r_squared": r2,
        }
    gates_cfg = cfg.section("gates")
    gates = {}
    if "slope_range" in gates_cfg and "lplr" in per_est:
        lo, hi = gates_cfg["slope_range"]
        s = summary["estimators"]["lplr"]["slope"]
        gates["lplr_slope_in_range"] = bool(lo <= s <= hi)
    if "slope_min" in gates_cfg:
        target = "ip_best" if "ip_best" in summary["estimators"] \
            else estimators[0]
        s = summary["estimators"][target]["slope"]
        gates["slope_above_min"] = bool(s >= gates_cfg["slope_min"])
        summary["gated_estimator"] = target
    if "reference_slope" in gates_cfg and "separation_min" in gates_cfg:
        target = summary.get("gated_estimator", estimators[0])
        s = summary["estimators"][target]["slope"]
        gates["separation_ok"] = bool(
            s - gates_cfg["reference_slope"] >= gates_cfg["separation_min"])
    summary["gates"] = gates
    return summary


# ---------------------------------------------------------------------------
# mse_lower_bound
# ---------------------------------------------------------------------------

def _run_mse_lower_bound(cfg: ExperimentConfig, out_dir: Path, threads: int,
                         zero_noise: bool) -> dict:
    n_grid = cfg.section("n_grid")
    R = cfg.replications
    estimators = cfg.section("estimators")
    rows = []
    summary: dict[str, Any] = {"grid": n_grid, "estimators": {}}
    xs = np.asarray(n_grid, dtype=float)
    gates = {}
    for ei, est_name in enumerate(estimators):
        minimax = []
        for ni, n in enumerate(n_grid):
            design = build_design(cfg.section("design"), n, cfg.alpha)
            second = design.second_moment()
            cands = _theta_candidates(cfg, design)
            cand_means = []
            for ti, theta in enumerate(cands):
                def job(rep, theta=theta, n=n, design=design, name=est_name,
                        ei=ei, ni=ni, ti=ti, second=second):
                    rng = np.random.default_rng(
                        _rep_seed(cfg.seed, ei, ni, ti, rep))
                    Phi, Y = hard_design_stream(design, n, theta, rng)
                    theta_hat = _estimator_theta_hat(name, Phi, Y, cfg.alpha,
                                                     rng)
                    return directional_mse(theta_hat, theta, second)
                vals = _map_jobs([lambda rep=rep: job(rep)
                                  for rep in range(R)], threads)
                for rep, v in enumerate(vals):
                    rows.append((est_name, ti, n, rep, v))
                cand_means.append(float(np.mean(vals)))
            minimax.append(max(cand_means))
        slope, intercept, r2 = fit_loglog_slope(xs, np.asarray(minimax))
        summary["estimators"][est_name] = {
            "minimax_dmse": minimax, "slope": slope,
            "intercept": intercept, "r_squared": r2,
        }
        if "slope_min" in cfg.section("gates"):
            gates[f"{est_name}_slope_ok"] = \
                bool(slope >= cfg.section("gates")["slope_min"])
    summary["gates"] = gates
    _write_csv(out_dir / "results.csv",
               ["estimator", "theta_idx", "n", "rep", "directional_mse"],
               rows)
    return summary


# ---------------------------------------------------------------------------
# regret_curve
# ---------------------------------------------------------------------------

def _policy_trace(name: str, spec: dict, env: LinearEnv, T: int,
                  alpha: float, ss: np.random.SeedSequence,
                  zero_noise: bool) -> RegretTrace:
    if name == "suffstat_ucb":
        conf_kwargs = dict(spec.get("config", {}))
        if zero_noise:
            conf_kwargs["zero_noise"] = True
        trace = suffstat_private_policy(env, T, alpha, ss,
                                        SuffStatConfig(**conf_kwargs))
        return trace
    if name == "lplr_elimination":
        params = build_layer_params(spec["oracle"], alpha, T=T)
        n0 = spec["oracle"].get("n0", spec.get("n0"))
        if n0 is None:
            n0 = EpochSchedule.paper_n0(params.d, T, params.beta)
        fitter = LplrEpochFitter(params, zero_noise=zero_noise)
        trace, _ = run_elimination(env, EpochSchedule(n0=n0, T=T), fitter,
                                   ss, policy_name=name)
        return trace
    if name == "nonprivate_ridge_elim":
        fitter = RidgeEpochFitter(
            d=env.d, lambda_reg=float(spec.get("lambda_reg", 1.0)),
            bonus_scale=float(spec.get("bonus_scale", 1.0)))
        n0 = int(spec.get("n0", 32))
        trace, _ = run_elimination(env, EpochSchedule(n0=n0, T=T), fitter,
                                   ss, policy_name=name)
        return trace
    if name == "exact_oracle":
        fitter = ExactTableFitter(env.theta_star)
        trace, _ = run_elimination(env, EpochSchedule(
            n0=int(spec.get("n0", 32)), T=T), fitter, ss, policy_name=name)
        return trace
    raise ConfigError(f"unknown policy {name}")


def _run_regret_curve(cfg: ExperimentConfig, out_dir: Path, threads: int,
                      zero_noise: bool) -> dict:
    T_grid = cfg.section("T_grid")
    R = cfg.replications
    policies = cfg.section("policies")
    trace_dir = out_dir / "traces"
    trace_dir.mkdir(exist_ok=True)
    rows = []
    summary: dict[str, Any] = {"grid": T_grid, "policies": {}}
    xs = np.asarray(T_grid, dtype=float)
    for spec in policies:
        name = spec["name"]
        means = []
        for ti, T in enumerate(T_grid):
            env = build_env(cfg.section("env"), T)

            def job(rep, T=T, ti=ti, env=env, name=name, spec=spec):
                trace = _policy_trace(name, spec, env, T, cfg.alpha,
                                      _rep_seed(cfg.seed, ti, rep),
                                      zero_noise)
                return trace

            traces = _map_jobs([lambda rep=rep: job(rep)
                                for rep in range(R)], threads)
            finals = [tr.final_regret for tr in traces]
            stride = max(1, T // 4096)
            traces[0].write_csv(trace_dir / f"trace_{name}_T{T}.csv",
                                stride=stride)
            for rep, v in enumerate(finals):
                rows.append((name, T, rep, v))
            means.append(float(np.mean(finals)))
        entry: dict[str, Any] = {
            "mean_final_regret": means,
            "std_final_regret": [
                float(np.std([r[3] for r in rows
                              if r[0] == name and r[1] == T], ddof=1))
                if R > 1 else 0.0 for T in T_grid],
        }
        if all(m > 0.0 for m in means) and len(T_grid) >= 4:
            slope, intercept, r2 = fit_loglog_slope(xs, np.asarray(means))
            entry.update(slope=slope, intercept=intercept, r_squared=r2)
        else:
            entry.update(slope=None, intercept=None, r_squared=None)
        summary["policies"][name] = entry
    _write_csv(out_dir / "results.csv",
               ["policy", "T", "rep", "final_regret"], rows)
    gates_cfg = cfg.section("gates")
    gates: dict[str, bool] = {}
    lplr = summary["policies"].get("lplr_elimination", {})
    base_name = gates_cfg.get("baseline", "suffstat_ucb")
    base = summary["policies"].get(base_name, {})
    if "lplr_slope_max" in gates_cfg and lplr.get("slope") is not None:
        gates["lplr_slope_ok"] = \
            bool(lplr["slope"] <= gates_cfg["lplr_slope_max"])
    if "separation_min" in gates_cfg and lplr.get("slope") is not None \
            and base.get("slope") is not None:
        gates["separation_ok"] = bool(
            base["slope"] - lplr["slope"] >= gates_cfg["separation_min"])
    summary["gates"] = gates
    return summary


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def run_experiment(
    config: ExperimentConfig | dict,
    out_dir: str | Path,
    zero_noise: bool = False,
    threads: int = 1,
) -> dict:
    """Execute an experiment and persist results.csv + summary.json.

    Returns the summary dict.  Raises ConfigError for invalid configs and
    cleans up partially written outputs on failure.
    """
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    if zero_noise and not config.allow_zero_noise:
        raise ConfigError("config demands privacy; --zero-noise refused "
                          "(set allow_zero_noise in the config for "
                          "diagnostic runs)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    created: list[Path] = []
    try:
        if config.kind == "mechanism_selftest":
            body = _run_mechanism_selftest(config, out_dir, threads)
        elif config.kind == "coverage_audit":
            body = _run_coverage_audit(config, out_dir, threads, zero_noise)
        elif config.kind == "mad_curve":
            body = _run_mad_curve(config, out_dir, threads, zero_noise)
        elif config.kind == "mse_lower_bound":
            body = _run_mse_lower_bound(config, out_dir, threads, zero_noise)
        else:
            body = _run_regret_curve(config, out_dir, threads, zero_noise)
        created.append(out_dir / "results.csv")
        summary = {
            "experiment": config.kind,
            "label": config.label,
            "config_hash": config.hash,
            "config": config.normalized,
            "zero_noise": bool(zero_noise),
            "results": body,
            "gates": body.get("gates", {}),
        }
        summary["gates_passed"] = all(summary["gates"].values()) \
            if summary["gates"] else True
        with open(out_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return summary
    except Exception:
        for path in created:
            if path.exists():
                path.unlink()
        raise
