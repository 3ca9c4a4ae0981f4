"""Analytics: rate fitting, deviation measures, and oracle verification.

The verification report recomputes each bin's ground-truth conditional
quantities (mass, moment vector, Gram matrix) by brute-force Monte Carlo
through the frozen fitted tree — the conditioning event "phi lands in bin B"
depends on the directions fitted at earlier layers, so fresh draws are routed
with exactly the estimator's own residual maps — and compares the privatized
estimates against their concentration bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .environments import sample_design
from .oracle import OracleEstimate
from .partition import LayerParams, PartitionTree

__all__ = [
    "fit_loglog_slope",
    "estimate_mad",
    "design_mad_exact",
    "directional_mse",
    "CoverageReport",
    "coverage_audit",
    "BinCheck",
    "VerificationReport",
    "concentration_report",
]


def fit_loglog_slope(
    xs: np.ndarray, ys: np.ndarray
) -> tuple[float, float, float]:
    """Least squares on (ln x, ln y): returns (slope, intercept, r_squared)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-D of equal length")
    if len(xs) < 4:
        raise ValueError("need at least 4 grid points for a rate fit")
    if np.any(xs <= 0.0) or np.any(ys <= 0.0):
        raise ValueError("rate fits need strictly positive values")
    lx = np.log(xs)
    ly = np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_res = float(resid @ resid)
    centered = ly - ly.mean()
    ss_tot = float(centered @ centered)
    r2 = 1.0 if ss_tot == 0.0 and ss_res == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def estimate_mad(
    theta_hat: np.ndarray,
    theta_star: np.ndarray,
    design,
    N: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Monte-Carlo mean absolute deviation E|phi . (theta_hat - theta_star)|.

    Returns (estimate, standard error); N must be at least 10^4.
    """
    if N < 10_000:
        raise ValueError("N must be >= 10^4")
    w = np.asarray(theta_hat, dtype=float) - np.asarray(theta_star, dtype=float)
    Phi = sample_design(design, N, rng)
    vals = np.abs(Phi @ w)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(N))


def design_mad_exact(design, w: np.ndarray) -> float:
    """Closed-form E|phi . w| for a finite-support design."""
    pts, probs = design.support()
    return float(probs @ np.abs(pts @ np.asarray(w, dtype=float)))


def directional_mse(
    theta_hat: np.ndarray, theta_star: np.ndarray, second_moment: np.ndarray
) -> float:
    """(theta_hat - theta_star)^T E[phi phi^T] (theta_hat - theta_star)."""
    w = np.asarray(theta_hat, dtype=float) - np.asarray(theta_star, dtype=float)
    return float(w @ np.asarray(second_moment, dtype=float) @ w)


# ---------------------------------------------------------------------------
# Coverage
# ---------------------------------------------------------------------------

@dataclass
class CoverageReport:
    """Fraction of runs whose confidence bound holds on the whole grid."""

    ok: np.ndarray               # (R,) bool, run covered everywhere
    max_violation: np.ndarray    # (R,) max of (|f_hat - f*| - delta)+ on grid

    @property
    def coverage_rate(self) -> float:
        return float(self.ok.mean())

    @property
    def worst_violation(self) -> float:
        return float(self.max_violation.max())


def coverage_audit(
    oracle_runs: Sequence[OracleEstimate],
    theta_stars: Sequence[np.ndarray] | np.ndarray,
    test_grid: np.ndarray,
    tol: float = 1e-9,
) -> CoverageReport:
    """Audit |f_hat(phi) - phi . theta*| <= delta(phi) over a feature grid."""
    test_grid = np.atleast_2d(np.asarray(test_grid, dtype=float))
    thetas = np.asarray(theta_stars, dtype=float)
    if thetas.ndim == 1:
        thetas = np.tile(thetas, (len(oracle_runs), 1))
    ok = np.zeros(len(oracle_runs), dtype=bool)
    max_v = np.zeros(len(oracle_runs))
    for i, est in enumerate(oracle_runs):
        f, delta = est.evaluate(test_grid)
        viol = np.maximum(np.abs(f - test_grid @ thetas[i]) - delta, 0.0)
        max_v[i] = float(viol.max())
        ok[i] = max_v[i] <= tol
    return CoverageReport(ok=ok, max_violation=max_v)


# ---------------------------------------------------------------------------
# Concentration verification against brute-force conditionals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BinCheck:
    """One bin's privatized estimates against ground-truth conditionals."""

    address: tuple[int, ...]
    psi_true: float
    psi_hat: float
    psi_resid: float
    psi_bound: float
    psi_ok: bool
    lam_resid: float | None      # None when the mass precondition fails
    lam_bound: float | None
    lam_ok: bool | None
    gram_resid: float | None
    gram_bound: float | None
    gram_ok: bool | None

    @property
    def all_ok(self) -> bool:
        return self.psi_ok and self.lam_ok is not False \
            and self.gram_ok is not False


@dataclass
class VerificationReport:
    """Concentration checks for every bin of a fitted tree."""

    checks: list[BinCheck]
    n_draws: int

    @property
    def all_ok(self) -> bool:
        return all(c.all_ok for c in self.checks)

    def failures(self) -> list[BinCheck]:
        return [c for c in self.checks if not c.all_ok]


def _lemma_bounds(params: LayerParams, n: int) -> dict[str, float]:
    d, a = params.d, params.alpha
    log48 = math.log(48.0 * d / (params.beta * params.delta))
    log48nb = math.log(48.0 * d / params.delta)
    log24 = math.log(24.0 * d / (params.beta * params.delta))
    return {
        "psi": 6.2 * d * log48 / (a * math.sqrt(n)),
        "lam_coef": (19.0 * d * d + 29.0 * d) * log48 / a,
        "lam_min_psi": 18.0 * d * d * log48 / (a * math.sqrt(n)),
        "gram_coef": (7.0 * (d + 1) ** 3 + 29.0 * d) * log48nb / a,
        "gram_min_psi": 18.0 * (d + 1) ** 3 * log24 / (a * math.sqrt(n)),
        "n_min": 2.0 * d * log24,
    }


def concentration_report(
    tree: PartitionTree,
    n: int,
    design,
    theta_star: np.ndarray,
    n_draws: int = 1_000_000,
    rng: np.random.Generator | None = None,
) -> VerificationReport:
    """Compare each bin's privatized statistics to brute-force conditionals.

    Draws ``n_draws`` fresh (phi, y = phi . theta*) pairs, routes them
    through the frozen tree layer by layer, and computes every bin's true
    mass, conditional moment vector and conditional Gram matrix.  Residuals
    are checked against the concentration bounds at the failure probability
    the tree was configured with (preconditions on mass and n gate the
    moment/Gram checks, matching the bounds' statements).
    """
    if n_draws < 1_000_000:
        raise ValueError("brute-force conditionals need >= 10^6 draws")
    rng = np.random.default_rng(0) if rng is None else rng
    params = tree.params
    theta_star = np.asarray(theta_star, dtype=float)
    Phi = sample_design(design, n_draws, rng)
    Y = Phi @ theta_star
    bounds = _lemma_bounds(params, n)
    checks: list[BinCheck] = []
    for h in range(1, tree.depth + 1):
        store = tree.layers[h - 1]
        routed = tree.route_batch(Phi, Y, depth=h)
        idx, phi_h, y_h = routed["idx"], routed["phi"], routed["y"]
        for b in range(store.n_bins):
            rows = idx == b
            count = int(np.count_nonzero(rows))
            psi_true = count / n_draws
            psi_hat = float(store.psi_hat[b])
            psi_resid = abs(psi_hat - psi_true)
            psi_ok = psi_resid <= bounds["psi"]
            lam_resid = lam_bound = lam_ok = None
            gram_resid = gram_bound = gram_ok = None
            g = float(store.width[b])
            if count > 0 and psi_hat > 0.0 and n >= bounds["n_min"]:
                if psi_true >= bounds["lam_min_psi"]:
                    lam_true = (y_h[rows, None] * phi_h[rows]).mean(axis=0)
                    lam_est = store.lam_hat[b] / (psi_hat * n)
                    lam_resid = float(np.linalg.norm(lam_est - lam_true))
                    lam_bound = bounds["lam_coef"] * g / \
                        (psi_true * math.sqrt(n))
                    lam_ok = lam_resid <= lam_bound
                if psi_true >= bounds["gram_min_psi"]:
                    rows_phi = phi_h[rows]
                    gram_true = rows_phi.T @ rows_phi / count
                    gram_est = store.Lam_hat[b] / (psi_hat * n)
                    diff = gram_est - gram_true
                    diff = (diff + diff.T) / 2.0
                    gram_resid = float(np.abs(np.linalg.eigvalsh(diff)).max())
                    gram_bound = bounds["gram_coef"] * g * g / \
                        (psi_true * math.sqrt(n))
                    gram_ok = gram_resid <= gram_bound
            checks.append(BinCheck(
                address=store.addresses[b],
                psi_true=psi_true, psi_hat=psi_hat,
                psi_resid=psi_resid, psi_bound=bounds["psi"], psi_ok=psi_ok,
                lam_resid=lam_resid, lam_bound=lam_bound, lam_ok=lam_ok,
                gram_resid=gram_resid, gram_bound=gram_bound, gram_ok=gram_ok,
            ))
    return VerificationReport(checks=checks, n_draws=n_draws)
