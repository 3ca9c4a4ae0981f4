"""End-to-end acceptance battery.

Each test runs one headline claim of the package at desk scale, registers a
one-line PASS/FAIL verdict (printed after the session and written to
``acceptance_report.txt``), and asserts it.  Experiments are shared through
module-scoped fixtures so a claim that feeds another (the oracle error slope
feeding the baseline-comparison gate) is measured exactly once.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

import acceptance_registry as acceptance
from plain_layered_pcr import PlainLayeredPCR
from ldpbandit import mechanisms
from ldpbandit.oracle import OracleConfig, run_oracle
from ldpbandit.partition import LayerParams
from ldpbandit.runner import run_experiment

SELFTEST_CONFIG = {
    "experiment": "mechanism_selftest", "label": "mechanisms",
    "seed": 0, "n_draws": 100_000,
}

COVERAGE_CONFIG = {
    "experiment": "coverage_audit", "label": "coverage",
    "seed": 11, "replications": 200, "alpha": 1.0,
    "env": {"kind": "random", "n_contexts": 6, "A": 2, "d": 2,
            "env_seed": 7, "noise": "binary"},
    "oracle": {"d": 2, "T": 64, "beta": 0.25, "delta": 0.05,
               "paper_mode": True},
    "n_per_layer": 128,
    "policy_check": {"T": 1024, "n0": 128},
    "gates": {"min_coverage": 0.9},
}

ORACLE_MAD_CONFIG = {
    "experiment": "mad_curve", "label": "oracle_error",
    "seed": 42, "replications": 50, "alpha": 1.0,
    "estimators": ["lplr"],
    "design": {"kind": "two_point",
               "points": [[0.88, 0.3], [0.88, -0.3]], "probs": [0.5, 0.5]},
    "oracle": {"d": 2, "T": 16, "beta": 0.25, "delta": 0.05,
               "kappa1": 0.05, "kappa1p": 0.05, "kappa2": 0.05,
               "kappa3": 0.01},
    "theta": [0.5, 0.3],
    "n_grid": [1024, 2048, 4096, 8192, 16384, 32768, 65536],
    "gates": {"slope_range": [-0.65, -0.35]},
}

IP_BEST_CONFIG = {
    "experiment": "mad_curve", "label": "ip_best",
    "seed": 42, "replications": 50, "alpha": 1.0,
    "estimators": ["ip_ridge", "ip_bias_corrected"],
    "design": {"kind": "mad_thm2"},
    "n_grid": [4096, 8192, 16384, 32768, 65536, 131072, 262144],
    "gates": {"slope_min": -0.42, "separation_min": 0.08,
              "reference_slope": None},    # filled from the oracle run
}

MSE_FLOOR_CONFIG = {
    "experiment": "mse_lower_bound", "label": "mse_floor",
    "seed": 7, "replications": 400, "alpha": 1.0,
    "design": {"kind": "mse_thm1"},
    "estimators": ["ip_ridge", "ip_bias_corrected", "suffstat"],
    "n_grid": [4096, 8192, 16384, 32768, 65536, 131072, 262144],
    "gates": {"slope_min": -0.65},
}

REGRET_CONFIG = {
    "experiment": "regret_curve", "label": "hard_env",
    "seed": 5, "replications": 30, "alpha": 1.0,
    "env": {"kind": "case2_mirror", "c": 8.0, "theta": [0.0, 1.0],
            "noise": "binary"},
    "policies": [
        {"name": "lplr_elimination",
         "oracle": {"d": 2, "T": 16, "beta": 0.1, "delta": "1/T^2",
                    "kappa1": 0.05, "kappa1p": 0.05, "kappa2": 0.02,
                    "kappa3": 0.004, "n0": 64}},
        {"name": "suffstat_ucb"},
    ],
    "T_grid": [4096, 8192, 16384, 32768, 65536, 131072],
    "gates": {"lplr_slope_max": 0.75, "separation_min": 0.05,
              "baseline": "suffstat_ucb"},
}


def _timed_run(config: dict, out_dir) -> tuple[dict, float]:
    t0 = time.perf_counter()
    summary = run_experiment(config, out_dir)
    return summary, time.perf_counter() - t0


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def selftest_run(out_root):
    return _timed_run(SELFTEST_CONFIG, out_root / "selftest")


@pytest.fixture(scope="module")
def coverage_run(out_root):
    return _timed_run(COVERAGE_CONFIG, out_root / "coverage")


@pytest.fixture(scope="module")
def oracle_mad_run(out_root):
    return _timed_run(ORACLE_MAD_CONFIG, out_root / "oracle_mad")


@pytest.fixture(scope="module")
def ip_best_run(out_root, oracle_mad_run):
    summary, _ = oracle_mad_run
    reference = summary["results"]["estimators"]["lplr"]["slope"]
    config = dict(IP_BEST_CONFIG)
    config["gates"] = dict(config["gates"], reference_slope=reference)
    return _timed_run(config, out_root / "ip_best") + (reference,)


@pytest.fixture(scope="module")
def mse_floor_run(out_root):
    return _timed_run(MSE_FLOOR_CONFIG, out_root / "mse_floor")


@pytest.fixture(scope="module")
def regret_run(out_root):
    return _timed_run(REGRET_CONFIG, out_root / "regret")


# ---------------------------------------------------------------------------
# 1-2: noise channels and privacy certificates
# ---------------------------------------------------------------------------

def test_criterion_1_channel_noise_moments(selftest_run):
    summary, elapsed = selftest_run
    checks = summary["results"]["moment_checks"]
    z_checks = [c for c in checks if c["threshold"] == 5.0]
    worst = max(abs(c["statistic"]) for c in z_checks)
    ok = bool(summary["gates"]["moments_ok"]) and elapsed < 60.0
    acceptance.record(
        1, "channel noise moments", ok,
        f"{len(checks)} checks at 1e5 draws, worst |z|={worst:.2f} "
        f"(limit 5), {elapsed:.1f}s")
    assert ok, f"moment battery failed: gates={summary['gates']}"


def test_criterion_2_privacy_certificates(selftest_run):
    summary, _ = selftest_run
    t0 = time.perf_counter()
    certs = []
    for d in (1, 2, 3):
        for gamma in (2.0, 3.25):
            for k in (0, 1, 3):
                for alpha in (0.05, 0.2, 1.0):
                    for s_hat in (0.04, 1.0):
                        for cert in mechanisms.oracle_channel_certificates(
                                d=d, gamma=gamma, k=k, alpha=alpha,
                                s_hat=s_hat):
                            certs.append((alpha, cert))
    elapsed = time.perf_counter() - t0
    for alpha, cert in certs:
        assert cert.worst_ratio <= cert.budget_bound * (1 + 1e-12), cert
        if cert.label.startswith(("count", "moment")):
            # per-update channels each spend a third of the budget
            assert cert.budget_bound == pytest.approx(math.exp(alpha / 3.0))
        else:
            assert cert.budget_bound == pytest.approx(math.exp(alpha))
    worst_margin = max(c.worst_ratio / c.budget_bound for _, c in certs)
    ok = all(c.ok for _, c in certs) \
        and bool(summary["gates"]["certificates_ok"]) and elapsed < 1.0
    acceptance.record(
        2, "privacy density certificates", ok,
        f"{len(certs)} closed-form certificates over the budget sweep, "
        f"max ratio/bound={worst_margin:.6f}, {elapsed * 1e3:.0f}ms")
    assert ok


# ---------------------------------------------------------------------------
# 3: zero-noise engine equals the independent reference
# ---------------------------------------------------------------------------

def _random_zero_noise_instance(idx: int, rng: np.random.Generator):
    d = 1 + idx % 3
    T, beta = [(16, 0.25), (64, 0.25), (256, 0.4), (64, 0.5)][idx % 4]
    params = LayerParams(d=d, T=T, beta=beta, alpha=1.0, delta=0.05,
                         kappa1=0.05, kappa1p=0.05, kappa2=0.05, kappa3=0.01)
    n = int(rng.integers(24, 80))
    total = 2 * d * n
    ks = rng.integers(0, params.M + 1, size=total)
    norms = params.gamma ** (-ks.astype(float)) \
        * rng.uniform(0.55, 0.999, size=total)
    dirs = rng.standard_normal((total, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    Phi = dirs * norms[:, None]
    theta = rng.standard_normal(d)
    theta *= rng.uniform(0.3, 0.99) / np.linalg.norm(theta)
    Y = Phi @ theta
    real = rng.random(total) > 0.1
    Phi[~real] = 0.0
    Y[~real] = 0.0
    probes = np.vstack([Phi[real][:20],
                        dirs[:10] * rng.uniform(0.05, 0.999, size=(10, 1)),
                        np.zeros((1, d))])
    return params, n, Phi, Y, real, probes


def _full_activation_design(d: int):
    """Spread mirror pairs whose whole routing path activates at every layer."""
    if d == 1:
        pts = np.array([[0.9]])
        live = np.array([[0.63]])
    elif d == 2:
        a = np.deg2rad(35.0)
        pts = 0.9 * np.array([[np.cos(a), np.sin(a)],
                              [np.cos(a), -np.sin(a)]])
        live = np.vstack([pts,
                          0.8 * np.array([1.0, 0.9]) / np.hypot(1.0, 0.9)])
    else:
        a, b = np.deg2rad(30.0), np.deg2rad(25.0)
        pts = np.array([[0.9 * np.cos(a), 0.9 * np.sin(a), 0.0],
                        [0.9 * np.cos(a), -0.9 * np.sin(a), 0.0],
                        [0.8 * np.cos(b), 0.0, 0.8 * np.sin(b)],
                        [0.8 * np.cos(b), 0.0, -0.8 * np.sin(b)]])
        v = np.array([1.0, 0.8, 0.6])
        live = np.vstack([pts[2:], 0.7 * v / np.linalg.norm(v)])
    return pts, live


def test_criterion_3_zero_noise_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20260823)
    mismatches = probes_checked = 0
    for idx in range(100):
        params, n, Phi, Y, real, probes = \
            _random_zero_noise_instance(idx, rng)
        est = run_oracle((Phi, Y, real),
                         OracleConfig(params, n, zero_noise=True), 0)
        ref = PlainLayeredPCR(params.d, params.gamma, params.M, n,
                              params.kappa1, params.kappa1p,
                              params.kappa2, params.kappa3).fit(Phi, Y, real)
        f_eng, d_eng = est.evaluate(probes)
        for j, probe in enumerate(probes):
            f_ref, d_ref = ref.predict(probe)
            probes_checked += 1
            if not (f_eng[j] == f_ref and d_eng[j] == d_ref
                    and est.f_hat(probe) == f_ref
                    and est.delta(probe) == d_ref):
                mismatches += 1

    # fully-active routing reproduces the linear form exactly
    worst_recon = 0.0
    for d in (1, 2, 3):
        pts, live = _full_activation_design(d)
        params = LayerParams(d=d, T=16, beta=0.5, alpha=1.0, delta=0.05,
                             kappa1=1e-6, kappa1p=1e-6, kappa2=1e-6,
                             kappa3=1e-6)
        n = 600
        total = 2 * d * n
        rows = pts[np.arange(total) % len(pts)]
        theta = np.random.default_rng(d).standard_normal(d)
        theta *= 0.8 / np.linalg.norm(theta)
        est = run_oracle((rows, rows @ theta, np.ones(total, dtype=bool)),
                         OracleConfig(params, n, zero_noise=True), 7)
        f, delta = est.evaluate(live)
        assert np.all(delta < 0.25), "routing fell back to a shell width"
        worst_recon = max(worst_recon,
                          float(np.abs(f - live @ theta).max()))
    elapsed = time.perf_counter() - t0

    ok = mismatches == 0 and worst_recon <= 1e-8 and elapsed < 60.0
    acceptance.record(
        3, "zero-noise exactness", ok,
        f"bitwise engine==reference on {probes_checked} predictions over "
        f"100 instances (d<=3), fully-active |f-phi.theta|<="
        f"{worst_recon:.1e}, {elapsed:.1f}s")
    assert ok, f"{mismatches} bitwise mismatches, recon {worst_recon:.2e}"


# ---------------------------------------------------------------------------
# 4 and 8: confidence coverage and policy invariants on one audit
# ---------------------------------------------------------------------------

def test_criterion_4_confidence_coverage(coverage_run):
    summary, elapsed = coverage_run
    body = summary["results"]
    ok = bool(summary["gates"]["coverage_ok"]) \
        and body["coverage_rate"] >= 0.90 and elapsed < 600.0
    acceptance.record(
        4, "confidence coverage", ok,
        f"coverage {body['coverage_rate']:.3f} over "
        f"{COVERAGE_CONFIG['replications']} replications "
        f"(floor 0.90), worst violation {body['worst_violation']:.3g}, "
        f"{elapsed:.1f}s")
    assert ok, f"coverage gate failed: {summary['gates']}"


def test_criterion_8_policy_invariants(coverage_run):
    summary, elapsed = coverage_run
    pol = summary["results"]["policy"]
    violations = (pol["retention_violations"], pol["nested_violations"],
                  pol["subopt_violations"])
    ok = bool(summary["gates"]["policy_invariants_ok"]) \
        and violations == (0, 0, 0)
    acceptance.record(
        8, "elimination policy invariants", ok,
        f"{pol['ci_valid_count']}/{pol['replications']} CI-valid runs, "
        f"retention/nested/suboptimality violations {violations}, "
        f"runtime shared with criterion 4 ({elapsed:.1f}s)")
    assert ok, f"policy invariants failed: {pol}"


# ---------------------------------------------------------------------------
# 5-7: error-scaling gates
# ---------------------------------------------------------------------------

def test_criterion_5_oracle_error_scaling(oracle_mad_run):
    summary, elapsed = oracle_mad_run
    fit = summary["results"]["estimators"]["lplr"]
    lo, hi = ORACLE_MAD_CONFIG["gates"]["slope_range"]
    ok = bool(summary["gates"]["lplr_slope_in_range"]) and elapsed < 1200.0
    acceptance.record(
        5, "private oracle error scaling", ok,
        f"mean-width slope {fit['slope']:.4f} in [{lo}, {hi}] "
        f"(r^2={fit['r_squared']:.3f}, 50 reps, n up to 2^16), "
        f"{elapsed:.1f}s")
    assert ok, f"slope {fit['slope']:.4f} outside [{lo}, {hi}]"


def test_criterion_6_input_perturbation_comparison(ip_best_run):
    summary, elapsed, reference = ip_best_run
    best = summary["results"]["estimators"]["ip_best"]
    separation = best["slope"] - reference
    gates = summary["gates"]
    ok = bool(gates["slope_above_min"]) and bool(gates["separation_ok"]) \
        and elapsed < 900.0
    acceptance.record(
        6, "input-perturbation comparison", ok,
        f"best-of-two slope {best['slope']:.4f} (needs >= -0.42), "
        f"separation over the layered oracle {separation:+.4f} "
        f"(needs >= +0.08), {elapsed:.1f}s")
    assert ok, (
        f"input-perturbation gates failed: slope {best['slope']:.4f} vs "
        f"-0.42 minimum, separation {separation:+.4f} vs +0.08 minimum")


def test_criterion_7_estimator_error_floors(mse_floor_run):
    summary, elapsed = mse_floor_run
    fits = summary["results"]["estimators"]
    slopes = {name: fits[name]["slope"]
              for name in MSE_FLOOR_CONFIG["estimators"]}
    gates = summary["gates"]
    ok = all(gates[f"{name}_slope_ok"] for name in slopes) and elapsed < 900.0
    detail = ", ".join(f"{name} {slope:.4f}"
                       for name, slope in sorted(slopes.items()))
    acceptance.record(
        7, "estimator error scaling floors", ok,
        f"directional-error slopes [{detail}] against the -0.65 floor "
        f"(400 reps), {elapsed:.1f}s")
    assert ok, f"slope floor violated: {slopes} (floor -0.65)"


# ---------------------------------------------------------------------------
# 9: hard-environment regret race
# ---------------------------------------------------------------------------

def test_criterion_9_hard_env_regret_separation(regret_run):
    summary, elapsed = regret_run
    pols = summary["results"]["policies"]
    lplr = pols["lplr_elimination"]["slope"]
    base = pols["suffstat_ucb"]["slope"]
    gates = summary["gates"]
    ok = bool(gates["lplr_slope_ok"]) and bool(gates["separation_ok"]) \
        and elapsed < 1800.0
    acceptance.record(
        9, "hard-environment regret separation", ok,
        f"elimination slope {lplr:.4f} (cap 0.75), sufficient-statistic "
        f"baseline {base:.4f}, separation {base - lplr:+.4f} "
        f"(needs >= +0.05), 30 reps, {elapsed / 60:.1f}min")
    assert ok, (f"regret gates failed: lplr {lplr:.4f}, baseline {base:.4f}, "
                f"gates {gates}")


# ---------------------------------------------------------------------------
# 10: bitwise determinism of persisted outputs
# ---------------------------------------------------------------------------

def test_criterion_10_bitwise_determinism(coverage_run, out_root):
    _, _ = coverage_run
    rerun_dir = out_root / "coverage_rerun"
    t0 = time.perf_counter()
    run_experiment(COVERAGE_CONFIG, rerun_dir)
    elapsed = time.perf_counter() - t0
    first = out_root / "coverage"
    same_csv = (first / "results.csv").read_bytes() \
        == (rerun_dir / "results.csv").read_bytes()
    same_summary = (first / "summary.json").read_bytes() \
        == (rerun_dir / "summary.json").read_bytes()
    ok = same_csv and same_summary
    acceptance.record(
        10, "bitwise determinism", ok,
        f"identical results.csv and summary.json on a same-seed rerun "
        f"of the coverage audit, {elapsed:.1f}s")
    assert ok, f"rerun differs: csv={same_csv} summary={same_summary}"
