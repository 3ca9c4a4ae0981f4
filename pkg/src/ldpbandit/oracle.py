"""Locally private layered regression oracle with confidence intervals.

One fit consumes 2*d*n samples: for each layer h = 1..d, an update batch of n
samples (privatized count/moment/gram increments into the layer-h bins,
followed by a projected principal-component fit per bin) and a fresh CI batch
of n samples (privatized accrual of the per-bin confidence slope).  The
finalized tree predicts f(phi) by summing the per-layer fitted slopes along
phi's routed path and reports a pointwise confidence width delta(phi).

Noise enters through three channels per update (each at budget alpha/3) and
one channel per CI sample (budget alpha); see mechanisms.  Per-sample noise
terms are accumulated in vectorized draws when a pass closes, which is
distribution-identical to adding them sample by sample because estimates are
only read at pass boundaries.

A zero-noise switch exists for exactness tests only; the command-line runner
refuses it for private configurations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .mechanisms import (
    LAPLACE_SPLIT,
    WISHART_SCALE,
    sample_laplace,
    centered_wishart_noise,
    sum_centered_wishart,
)
from .partition import BinNode, LayerParams, PartitionTree, _LayerStore

__all__ = [
    "OracleConfig",
    "OracleEstimate",
    "LayeredOracle",
    "psd_project_orthogonal",
    "lplr_update",
    "lplr_pcr",
    "lplr_ci",
    "lplr_aggregate",
    "evaluate_tree",
    "run_oracle",
]

_SIGN_EPS = 1e-12


@dataclass(frozen=True)
class OracleConfig:
    """Sample budget and switches for one oracle fit."""

    layer_params: LayerParams
    n_per_layer: int
    zero_noise: bool = False

    def __post_init__(self) -> None:
        if self.n_per_layer < 1:
            raise ValueError("n_per_layer must be >= 1")
        p = self.layer_params
        if p.paper_faithful:
            floor = 2.0 * p.d * math.log(24.0 * p.d / (p.beta * p.delta))
            if self.n_per_layer < floor:
                raise ValueError(
                    f"paper-faithful mode requires n_per_layer >= {floor:.1f}"
                )

    @property
    def total_samples(self) -> int:
        return 2 * self.layer_params.d * self.n_per_layer


def _sign_fix(u: np.ndarray) -> np.ndarray:
    """Flip u so its first coordinate of magnitude > 1e-12 is positive."""
    for v in u:
        if abs(v) > _SIGN_EPS:
            return -u if v < 0.0 else u
    return u


def psd_project_orthogonal(Mraw: np.ndarray, U: np.ndarray | None) -> np.ndarray:
    """Nearest PSD matrix (operator norm, symmetric class) with range orthogonal to U.

    Computes P sym(Mraw) P with P = I - U U^T, then clips negative eigenvalues
    to zero.  U must have orthonormal columns (or be empty/None).
    """
    mat, _, _ = _psd_project_eig(Mraw, U)
    return mat


def _psd_project_eig(
    Mraw: np.ndarray, U: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """PSD-orthogonal projection plus its (ascending) eigendecomposition."""
    Mraw = np.asarray(Mraw, dtype=float)
    d = Mraw.shape[0]
    if Mraw.shape != (d, d):
        raise ValueError("Mraw must be square")
    sym = (Mraw + Mraw.T) / 2.0
    if U is not None and U.size:
        U = np.asarray(U, dtype=float)
        if U.ndim != 2 or U.shape[0] != d:
            raise ValueError("U must be d x m with orthonormal columns")
        gram = U.T @ U
        if not np.allclose(gram, np.eye(U.shape[1]), atol=1e-8):
            raise ValueError("U columns must be orthonormal")
        p = np.eye(d) - U @ U.T
        sym = p @ sym @ p
        sym = (sym + sym.T) / 2.0
    w, v = np.linalg.eigh(sym)
    w_clip = np.clip(w, 0.0, None)
    mat = (v * w_clip) @ v.T
    return mat, w_clip, v


# ---------------------------------------------------------------------------
# Per-sample update (unit-level form; the batch engine accumulates the same
# increments and draws the same noise at pass close)
# ---------------------------------------------------------------------------

def lplr_update(
    bin_node: BinNode,
    phi_h: np.ndarray | None,
    y_h: float | None,
    alpha: float,
    k_h: int,
    rng: np.random.Generator,
    zero_noise: bool = False,
) -> None:
    """Apply one sample's privatized increments to a bin.

    A blank sample (phi_h None) contributes noise only; a real sample adds its
    count/moment/gram contribution plus the same noise.  Noise scales carry
    the bin's norm bound g = gamma^-k so every channel certifies its budget.
    """
    d = bin_node.lambda_hat.shape[0]
    g = bin_node.width
    real = phi_h is not None
    if real:
        phi_h = np.asarray(phi_h, dtype=float)
        if np.linalg.norm(phi_h) > g * (1.0 + 1e-9):
            raise ValueError("residual norm exceeds the bin's shell bound")
        y_h = min(1.0, max(-1.0, float(y_h)))
    if zero_noise:
        if real:
            bin_node.c_hat = bin_node.c_hat + 1.0
            bin_node.lambda_hat = bin_node.lambda_hat + y_h * phi_h
            bin_node.Lambda_hat = bin_node.Lambda_hat + np.outer(phi_h, phi_h)
        return
    c_inc = float(sample_laplace(1, LAPLACE_SPLIT / alpha, rng)[0])
    lam_inc = LAPLACE_SPLIT * math.sqrt(d) * g / alpha * \
        np.asarray(sample_laplace(d, 1.0, rng))
    gram_inc = centered_wishart_noise(d, alpha, 3.0 * g * g, rng)
    if real:
        c_inc += 1.0
        lam_inc = lam_inc + y_h * phi_h
        gram_inc = gram_inc + np.outer(phi_h, phi_h)
    bin_node.c_hat = bin_node.c_hat + c_inc
    bin_node.lambda_hat = bin_node.lambda_hat + lam_inc
    bin_node.Lambda_hat = bin_node.Lambda_hat + gram_inc


# ---------------------------------------------------------------------------
# Pass-close helpers (shared by the streaming and batch engines)
# ---------------------------------------------------------------------------

def _add_update_noise(
    store: _LayerStore, n: int, alpha: float, rng: np.random.Generator
) -> None:
    """Add the summed per-sample noise of an n-sample update pass to every bin."""
    nb = store.n_bins
    d = store.lam_hat.shape[1]
    store.c_hat += rng.laplace(0.0, LAPLACE_SPLIT / alpha, size=(n, nb)).sum(axis=0)
    raw = rng.laplace(0.0, 1.0, size=(n, nb, d)).sum(axis=0)
    store.lam_hat += raw * (LAPLACE_SPLIT * math.sqrt(d) / alpha * store.width)[:, None]
    for b in range(nb):
        store.Lam_hat[b] += sum_centered_wishart(
            d, alpha, 3.0 * store.width[b] ** 2, n, rng)


def _fit_layer(store: _LayerStore, n: int, params: LayerParams) -> None:
    """Projected principal-component fit for every eligible bin of a layer."""
    d = params.d
    store.psi_hat = store.c_hat / float(n)
    threshold = params.kappa1 * params.gamma ** 2 * (d + 1) ** 3 / math.sqrt(n)
    for b in range(store.n_bins):
        if not store.active[b] or store.k[b] >= params.M \
                or store.psi_hat[b] <= threshold:
            store.active[b] = False
            continue
        denom = store.psi_hat[b] * n
        gram = store.Lam_hat[b] / denom
        anc = store.anc_U[b]
        _, w_clip, v = _psd_project_eig(gram, anc.T if anc.size else None)
        s_top = float(w_clip[-1])
        if s_top <= 0.0:
            store.active[b] = False
            continue
        u_top = _sign_fix(v[:, -1].copy())
        moment = store.lam_hat[b] / denom
        store.u[b] = u_top
        store.s[b] = s_top
        store.theta[b] = u_top * (float(u_top @ moment) / s_top)
    store.pcr_done = True


def _add_ci_noise(
    store: _LayerStore, n: int, alpha: float, rng: np.random.Generator
) -> None:
    """Add the summed CI-channel noise of an n-sample pass to every active bin."""
    active_idx = np.flatnonzero(store.active)
    if active_idx.size == 0:
        return
    raw = rng.laplace(0.0, 1.0, size=(n, active_idx.size)).sum(axis=0)
    coef = store.width[active_idx] / (alpha * np.sqrt(store.s[active_idx]))
    store.eps_hat[active_idx] += raw * coef


def _finalize_ci(store: _LayerStore, n: int, params: LayerParams) -> None:
    """Turn accrued CI totals into per-bin confidence parameters."""
    d = params.d
    threshold = params.kappa1p * params.gamma * d ** 1.5 / math.sqrt(n)
    for b in range(store.n_bins):
        if not store.active[b] or store.psi_hat[b] <= threshold:
            store.ci_ok[b] = False
            continue
        denom = store.psi_hat[b]
        store.ci_ok[b] = True
        store.eps_bar[b] = store.eps_hat[b] / (denom * n) + \
            params.kappa2 * params.gamma * d ** 1.5 / (denom * math.sqrt(n))
        store.ci_const[b] = \
            params.kappa3 * params.gamma ** 2 * (d + 1) ** 4 / (denom * math.sqrt(n))
    store.ci_done = True


# ---------------------------------------------------------------------------
# The oracle engine
# ---------------------------------------------------------------------------

class LayeredOracle:
    """Streaming layered-PCR fit over a 2*d*n sample budget.

    Samples are consumed strictly in order: update batch then CI batch for
    layer 1, then layer 2, and so on.  ``feed`` accepts one (phi, y) pair per
    call (phi None for the blank placeholder); ``run_stream`` consumes
    pre-assembled arrays through the same pass pipeline, vectorized.
    """

    def __init__(self, config: OracleConfig,
                 seed: int | np.random.SeedSequence | np.random.Generator):
        self.config = config
        self.params = config.layer_params
        self.tree = PartitionTree(self.params)
        d = self.params.d
        if isinstance(seed, np.random.Generator):
            self._pass_rngs = seed.spawn(2 * d)
        else:
            seq = seed if isinstance(seed, np.random.SeedSequence) \
                else np.random.SeedSequence(seed)
            self._pass_rngs = [np.random.default_rng(s) for s in seq.spawn(2 * d)]
        self._pass_index = 0
        self._count = 0
        self._finished = False
        self.tree.materialize_layer(1)

    # -- state -------------------------------------------------------------

    @property
    def finished(self) -> bool:
        return self._finished

    @property
    def _h(self) -> int:
        return self._pass_index // 2 + 1

    @property
    def _stage(self) -> str:
        return "update" if self._pass_index % 2 == 0 else "ci"

    @property
    def samples_consumed(self) -> int:
        return self._pass_index * self.config.n_per_layer + self._count

    # -- streaming ---------------------------------------------------------

    def feed(self, phi: np.ndarray | None, y: float) -> None:
        """Consume one sample (phi None means the blank placeholder)."""
        if self._finished:
            raise RuntimeError("oracle already finalized")
        h = self._h
        store = self.tree.layers[h - 1]
        if phi is not None:
            if self._stage == "update":
                idx, phi_h, y_h, _ = self.tree.route_one(phi, y, depth=h)
                if idx >= 0:
                    store.c_hat[idx] += 1.0
                    store.lam_hat[idx] += y_h * phi_h
                    store.Lam_hat[idx] += np.outer(phi_h, phi_h)
            else:
                idx, phi_h, _, eta = self.tree.route_one(
                    phi, None, depth=h, want_eta=True)
                if idx >= 0 and store.active[idx]:
                    s_val = float(store.s[idx])
                    store.eps_hat[idx] += \
                        eta * abs(float(phi_h @ store.u[idx])) / math.sqrt(s_val)
        self._count += 1
        if self._count == self.config.n_per_layer:
            self._close_pass()

    def feed_blank(self) -> None:
        self.feed(None, 0.0)

    # -- batch -------------------------------------------------------------

    def run_stream(
        self,
        Phi: np.ndarray,
        Y: np.ndarray,
        real: np.ndarray | None = None,
    ) -> "OracleEstimate":
        """Consume a pre-assembled stream of 2*d*n rows, vectorized per pass.

        ``real`` marks rows carrying data (False rows are blank placeholders).
        Accumulation uses bucketed sums in stream order, so zero-noise batch
        and streaming runs agree to float tolerance; noise draws are identical
        in both paths.
        """
        Phi = np.asarray(Phi, dtype=float)
        Y = np.asarray(Y, dtype=float)
        n = self.config.n_per_layer
        total = self.config.total_samples
        if Phi.shape[0] < total:
            raise ValueError(
                f"stream has {Phi.shape[0]} rows; budget needs {total}")
        if real is None:
            real = np.ones(Phi.shape[0], dtype=bool)
        if self._pass_index != 0 or self._count != 0:
            raise RuntimeError("run_stream requires a fresh oracle")
        d = self.params.d
        for p in range(2 * d):
            h = p // 2 + 1
            store = self.tree.layers[h - 1]
            lo, hi = p * n, (p + 1) * n
            rows = real[lo:hi]
            Phi_c = Phi[lo:hi][rows]
            if p % 2 == 0:
                routed = self.tree.route_batch(Phi_c, Y[lo:hi][rows], depth=h)
                self._accumulate_update(store, routed)
            else:
                routed = self.tree.route_batch(Phi_c, None, depth=h, want_eta=True)
                self._accumulate_ci(store, routed)
            self._pass_index = p
            self._count = n
            self._close_pass()
        return self.finalize()

    @staticmethod
    def _accumulate_update(store: _LayerStore, routed: dict) -> None:
        idx, phi, y = routed["idx"], routed["phi"], routed["y"]
        keep = idx >= 0
        idx, phi, y = idx[keep], phi[keep], y[keep]
        nb = store.n_bins
        d = phi.shape[1] if phi.size else store.lam_hat.shape[1]
        store.c_hat += np.bincount(idx, minlength=nb).astype(float)
        for j in range(d):
            store.lam_hat[:, j] += np.bincount(
                idx, weights=y * phi[:, j], minlength=nb)
            for l in range(d):
                store.Lam_hat[:, j, l] += np.bincount(
                    idx, weights=phi[:, j] * phi[:, l], minlength=nb)

    @staticmethod
    def _accumulate_ci(store: _LayerStore, routed: dict) -> None:
        idx, phi, eta = routed["idx"], routed["phi"], routed["eta"]
        keep = idx >= 0
        keep &= store.active[np.where(keep, idx, 0)]
        idx_k, phi_k, eta_k = idx[keep], phi[keep], eta[keep]
        if idx_k.size == 0:
            return
        s_rows = store.s[idx_k]
        proj = np.abs(np.einsum("ij,ij->i", phi_k, store.u[idx_k]))
        store.eps_hat += np.bincount(
            idx_k, weights=eta_k * proj / np.sqrt(s_rows),
            minlength=store.n_bins)

    # -- pass transitions --------------------------------------------------

    def _close_pass(self) -> None:
        n = self.config.n_per_layer
        params = self.params
        h = self._h
        store = self.tree.layers[h - 1]
        rng = self._pass_rngs[self._pass_index]
        if self._stage == "update":
            if not self.config.zero_noise:
                _add_update_noise(store, n, params.alpha, rng)
            _fit_layer(store, n, params)
        else:
            if not self.config.zero_noise:
                _add_ci_noise(store, n, params.alpha, rng)
            _finalize_ci(store, n, params)
            if h < params.d:
                self.tree.materialize_layer(h + 1)
        self._pass_index += 1
        self._count = 0
        if self._pass_index == 2 * params.d:
            self._finished = True

    def finalize(self) -> "OracleEstimate":
        if not self._finished:
            raise RuntimeError(
                f"oracle needs {self.config.total_samples} samples, got "
                f"{self.samples_consumed}")
        return OracleEstimate(self.tree)


# ---------------------------------------------------------------------------
# Prediction over a finalized tree
# ---------------------------------------------------------------------------

def evaluate_tree(tree: PartitionTree, Phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized prediction: descend each feature's path, summing layer fits.

    Descent stops at the first bin with no fitted direction; that bin's
    confidence parameters give the reported width.  The exact zero vector is
    the blank placeholder and gets (0, 0) by definition.
    """
    params = tree.params
    Phi_cur = np.atleast_2d(np.asarray(Phi, dtype=float))
    n = Phi_cur.shape[0]
    y_hat = np.zeros(n)
    eta = np.zeros(n)
    stopped = np.zeros(n, dtype=bool)
    zero_mask = np.linalg.norm(Phi_cur, axis=1) == 0.0
    idx = np.full(n, -1, dtype=np.int64)
    Phi_cur = Phi_cur.copy()
    for layer_i in range(len(tree.layers)):
        store = tree.layers[layer_i]
        live = ~stopped
        if not live.any():
            break
        norms = np.linalg.norm(Phi_cur, axis=1)
        k = params.shell_index(norms)
        if layer_i == 0:
            new_idx = np.asarray(k, dtype=np.int64)
        else:
            prev = tree.layers[layer_i - 1]
            base = np.where(idx >= 0, prev.child_base[idx], -1)
            new_idx = np.where(base >= 0, base + k, -1)
        idx = np.where(live, new_idx, idx)
        safe = np.where(live & (idx >= 0), idx, 0)
        ok = live & (idx >= 0)
        theta_rows = store.theta[safe]
        y_hat = np.where(
            ok, y_hat + np.einsum("ij,ij->i", Phi_cur, theta_rows), y_hat)
        u_rows = store.u[safe]
        s_rows = store.s[safe]
        proj = np.abs(np.einsum("ij,ij->i", Phi_cur, u_rows))
        slope = np.divide(proj, np.sqrt(np.where(s_rows > 0, s_rows, 1.0)),
                          out=np.zeros(n), where=s_rows > 0)
        chi = np.clip(store.ci_const[safe] + store.eps_bar[safe] * slope,
                      0.0, 1.0)
        eta = np.where(
            ok & store.ci_ok[safe], np.minimum(1.0, eta + chi),
            np.where(ok, store.width[safe], eta))
        stopped |= ok & (s_rows == 0.0)
        stopped |= live & (idx < 0)
        cont = ~stopped
        coef = np.einsum("ij,ij->i", Phi_cur, u_rows)
        Phi_cur = np.where(cont[:, None], Phi_cur - coef[:, None] * u_rows, Phi_cur)
    f = np.clip(y_hat, -1.0, 1.0)
    f[zero_mask] = 0.0
    eta = eta.copy()
    eta[zero_mask] = 0.0
    return f, eta


def lplr_aggregate(tree: PartitionTree, phi: np.ndarray) -> tuple[float, float]:
    """Scalar prediction: (clipped fit value, confidence width) for one feature."""
    f, delta = evaluate_tree(tree, np.asarray(phi, dtype=float)[None, :])
    return float(f[0]), float(delta[0])


class OracleEstimate:
    """Immutable prediction handle over a finalized tree.

    ``f_hat`` is clipped to [-1, 1]; ``delta`` is 0 at the exact zero vector
    and otherwise in (0, 1].
    """

    def __init__(self, tree: PartitionTree):
        self.tree = tree

    def f_hat(self, phi: np.ndarray) -> float:
        return lplr_aggregate(self.tree, phi)[0]

    def delta(self, phi: np.ndarray) -> float:
        return lplr_aggregate(self.tree, phi)[1]

    def evaluate(self, Phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return evaluate_tree(self.tree, Phi)

    def mean_delta(self, Phi: np.ndarray) -> tuple[float, float]:
        """Empirical mean confidence width over a design sample, with std error."""
        _, delta = evaluate_tree(self.tree, Phi)
        return float(delta.mean()), float(delta.std(ddof=1) / math.sqrt(len(delta)))


# ---------------------------------------------------------------------------
# Standalone functional wrappers around the tree internals
# ---------------------------------------------------------------------------

def lplr_pcr(
    bin_node: BinNode, n: int, ancestors_U: np.ndarray | None, params: LayerParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fit one bin: returns (u_hat, s_hat, theta_hat), zeros if ineligible."""
    store = bin_node._store
    i = bin_node._i
    store.psi_hat[i] = store.c_hat[i] / float(n)
    d = params.d
    threshold = params.kappa1 * params.gamma ** 2 * (d + 1) ** 3 / math.sqrt(n)
    eligible = store.active[i] and store.k[i] < params.M \
        and store.psi_hat[i] > threshold
    if eligible:
        denom = store.psi_hat[i] * n
        U = None
        if ancestors_U is not None and np.asarray(ancestors_U).size:
            U = np.asarray(ancestors_U, dtype=float)
        _, w_clip, v = _psd_project_eig(store.Lam_hat[i] / denom, U)
        s_top = float(w_clip[-1])
        if s_top > 0.0:
            u_top = _sign_fix(v[:, -1].copy())
            store.u[i] = u_top
            store.s[i] = s_top
            store.theta[i] = u_top * (
                float(u_top @ (store.lam_hat[i] / denom)) / s_top)
            return store.u[i], np.array(s_top), store.theta[i]
    store.active[i] = False
    store.u[i] = 0.0
    store.s[i] = 0.0
    store.theta[i] = 0.0
    return store.u[i], np.array(0.0), store.theta[i]


def lplr_ci(
    h: int,
    fresh_phis: Iterable[np.ndarray],
    tree: PartitionTree,
    alpha: float,
    rng: np.random.Generator,
    n: int,
    zero_noise: bool = False,
) -> None:
    """Run a full CI pass for layer h over ``n`` fresh features.

    Blank placeholders are passed as None entries.  Requires the layer's fit
    stage to be complete.
    """
    store = tree.layers[h - 1]
    if not store.pcr_done:
        raise ValueError("layer fit must precede the CI pass")
    count = 0
    for phi in fresh_phis:
        if count == n:
            break
        if phi is not None:
            idx, phi_h, _, eta = tree.route_one(phi, None, depth=h, want_eta=True)
            if idx >= 0 and store.active[idx]:
                store.eps_hat[idx] += \
                    eta * abs(float(phi_h @ store.u[idx])) / math.sqrt(float(store.s[idx]))
        count += 1
    if count < n:
        raise ValueError(f"CI pass needs {n} samples, got {count}")
    if not zero_noise:
        _add_ci_noise(store, n, alpha, rng)
    _finalize_ci(store, n, tree.params)


def _as_stream(samples) -> Iterator[tuple[np.ndarray | None, float]]:
    for item in samples:
        yield item


def run_oracle(
    samples,
    config: OracleConfig,
    seed: int | np.random.SeedSequence | np.random.Generator,
) -> OracleEstimate:
    """Fit an oracle from a sample stream and return its prediction handle.

    ``samples`` is either an iterable of (phi-or-None, y) pairs or a tuple of
    arrays (Phi, Y, real_mask); the stream must cover the 2*d*n budget.
    """
    oracle = LayeredOracle(config, seed)
    if isinstance(samples, tuple) and len(samples) == 3 \
            and isinstance(samples[0], np.ndarray):
        return oracle.run_stream(*samples)
    stream = _as_stream(samples)
    total = config.total_samples
    for _ in range(total):
        try:
            phi, y = next(stream)
        except StopIteration as exc:
            raise ValueError(
                f"stream exhausted before the {total}-sample budget") from exc
        oracle.feed(phi, y)
    return oracle.finalize()
