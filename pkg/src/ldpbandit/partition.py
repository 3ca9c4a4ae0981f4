"""Layered hierarchical partition of the unit feature ball.

The feature ball is cut into norm shells (gamma^-(k+1), gamma^-k], k = 0..M-1,
plus the innermost ball of radius gamma^-M.  A *bin* at layer h is addressed by
the shell indices (k_1, ..., k_h) its samples passed through; a sample's layer
h+1 coordinates are the residuals after projecting out the direction fitted in
its layer-h bin and subtracting that bin's predicted reward.

Bins whose address contains M ("norm-negligible" samples) are kept as leaves:
they absorb mass and receive noise updates but are never split or fitted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

__all__ = [
    "LayerParams",
    "BinNode",
    "RoutedSample",
    "LayerRecord",
    "PartitionTree",
    "child_address",
    "is_partitioning",
]


def _log_term(d: int, beta: float, delta: float, numerator: float) -> float:
    return math.log(numerator * d / (beta * delta))


@dataclass(frozen=True)
class LayerParams:
    """Geometry and threshold parameters shared by every layer of one tree.

    gamma = T**beta is the shell ratio and M = ceil(1/(2*beta)) the number of
    shells per layer.  kappa1 gates fitting, kappa1p gates CI construction,
    kappa2/kappa3 size the CI widths.  With ``paper_faithful`` on, the kappas
    must sit above their analytical floors (which make every bin inactive at
    small n; desk-scale experiments run with smaller, calibrated kappas).
    """

    d: int
    T: int
    beta: float
    alpha: float
    delta: float
    kappa1: float
    kappa1p: float
    kappa2: float
    kappa3: float
    paper_faithful: bool = False

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")
        for name in ("kappa1", "kappa1p", "kappa2", "kappa3"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.T ** self.beta < 2.0:
            raise ValueError(
                f"gamma = T**beta = {self.T ** self.beta:.4f} < 2; "
                "increase T or beta"
            )
        if self.paper_faithful:
            floors = self.kappa_floors()
            for name, floor in floors.items():
                if getattr(self, name) < floor * (1.0 - 1e-9):
                    raise ValueError(
                        f"paper-faithful mode requires {name} >= {floor:.3f}, "
                        f"got {getattr(self, name)}"
                    )

    def kappa_floors(self) -> dict[str, float]:
        """Analytical lower bounds on the four kappas (paper-faithful mode)."""
        a = self.alpha
        return {
            "kappa1": 43.0 / a * _log_term(self.d, self.beta, self.delta, 48.0),
            "kappa1p": 15.0 / a * _log_term(self.d, self.beta, self.delta, 48.0),
            "kappa2": 118.0 / a * _log_term(self.d, self.beta, self.delta, 24.0),
            "kappa3": 300.0 / a * _log_term(self.d, self.beta, self.delta, 48.0),
        }

    @classmethod
    def paper_mode(
        cls, d: int, T: int, beta: float, alpha: float, delta: float
    ) -> "LayerParams":
        """Parameters pinned exactly at the analytical kappa floors."""
        probe = cls(d=d, T=T, beta=beta, alpha=alpha, delta=delta,
                    kappa1=1.0, kappa1p=1.0, kappa2=1.0, kappa3=1.0)
        floors = probe.kappa_floors()
        return cls(d=d, T=T, beta=beta, alpha=alpha, delta=delta,
                   paper_faithful=True, **floors)

    @cached_property
    def gamma(self) -> float:
        return float(self.T) ** self.beta

    @cached_property
    def M(self) -> int:
        return math.ceil(1.0 / (2.0 * self.beta))

    @cached_property
    def shell_bounds(self) -> np.ndarray:
        """Ascending norm bounds [gamma^-M, ..., gamma^-1, 1]."""
        return self.gamma ** (-np.arange(self.M, -1, -1, dtype=float))

    def shell_index(self, norms: np.ndarray | float) -> np.ndarray | int:
        """Largest k <= M with norm <= gamma^-k (ties resolve to the larger k).

        Norms up to 1 + 1e-9 are tolerated (mapped to k = 0); anything larger
        is rejected.
        """
        arr = np.asarray(norms, dtype=float)
        if np.any(arr > 1.0 + 1e-9):
            raise ValueError("feature norm exceeds 1 + 1e-9")
        k = self.M - np.searchsorted(self.shell_bounds, arr, side="left")
        k = np.clip(k, 0, self.M)
        if np.ndim(norms) == 0:
            return int(k)
        return k.astype(np.int64)


def is_partitioning(address: tuple[int, ...], M: int) -> bool:
    """A bin may be split further iff every address component is below M."""
    return all(k < M for k in address)


def child_address(parent: tuple[int, ...], k: int, M: int) -> tuple[int, ...]:
    """Extend a partitioning bin's address by one shell index."""
    if not is_partitioning(parent, M):
        raise ValueError(f"bin {parent} is not a partitioning bin")
    if not (0 <= k <= M):
        raise ValueError(f"shell index {k} outside 0..{M}")
    return parent + (k,)


@dataclass
class _LayerStore:
    """Flat arrays holding every materialized bin of one layer."""

    h: int
    addresses: list[tuple[int, ...]]
    k: np.ndarray            # (nb,) last address component
    parent: np.ndarray       # (nb,) index into the previous layer, -1 at h=1
    child_base: np.ndarray   # (nb,) first-child index in layer h+1, -1 if none
    active: np.ndarray       # (nb,) bool; set False by thresholds/inheritance
    width: np.ndarray        # (nb,) gamma^-k fallback confidence width
    c_hat: np.ndarray        # (nb,) privatized sample count
    lam_hat: np.ndarray      # (nb, d) privatized moment vector
    Lam_hat: np.ndarray      # (nb, d, d) privatized gram matrix
    psi_hat: np.ndarray      # (nb,) c_hat / n, set when the layer pass closes
    u: np.ndarray            # (nb, d) fitted direction (0 if unfitted)
    s: np.ndarray            # (nb,) fitted top eigenvalue (0 if unfitted)
    theta: np.ndarray        # (nb, d) fitted slope, rank-one along u
    eps_hat: np.ndarray      # (nb,) CI accrual total
    eps_bar: np.ndarray      # (nb,) normalized CI slope term
    ci_const: np.ndarray     # (nb,) constant CI term
    ci_ok: np.ndarray        # (nb,) bool; False => width fallback, children off
    anc_U: list[np.ndarray] = field(default_factory=list)  # per-bin (m, d)
    pcr_done: bool = False
    ci_done: bool = False

    @property
    def n_bins(self) -> int:
        return len(self.addresses)


class BinNode:
    """Read/write view of a single bin backed by its layer's arrays."""

    __slots__ = ("_store", "_i")

    def __init__(self, store: _LayerStore, index: int):
        self._store = store
        self._i = index

    @property
    def address(self) -> tuple[int, ...]:
        return self._store.addresses[self._i]

    @property
    def k(self) -> int:
        return int(self._store.k[self._i])

    @property
    def width(self) -> float:
        return float(self._store.width[self._i])

    def _get(self, name):
        return getattr(self._store, name)[self._i]

    def _set(self, name, value) -> None:
        getattr(self._store, name)[self._i] = value

    @property
    def c_hat(self) -> float:
        return float(self._get("c_hat"))

    @c_hat.setter
    def c_hat(self, v: float) -> None:
        self._set("c_hat", v)

    @property
    def lambda_hat(self) -> np.ndarray:
        return self._store.lam_hat[self._i]

    @lambda_hat.setter
    def lambda_hat(self, v: np.ndarray) -> None:
        self._store.lam_hat[self._i] = v

    @property
    def Lambda_hat(self) -> np.ndarray:
        return self._store.Lam_hat[self._i]

    @Lambda_hat.setter
    def Lambda_hat(self, v: np.ndarray) -> None:
        self._store.Lam_hat[self._i] = v

    @property
    def u_hat(self) -> np.ndarray:
        return self._store.u[self._i]

    @property
    def s_hat(self) -> float:
        return float(self._get("s"))

    @property
    def theta_hat(self) -> np.ndarray:
        return self._store.theta[self._i]

    @property
    def psi_hat(self) -> float:
        return float(self._get("psi_hat"))

    @property
    def eps_hat(self) -> float:
        return float(self._get("eps_hat"))

    @property
    def eps_bar(self) -> float:
        return float(self._get("eps_bar"))

    @property
    def ci_const(self) -> float:
        return float(self._get("ci_const"))

    @property
    def active(self) -> bool:
        return bool(self._get("active"))


@dataclass(frozen=True)
class LayerRecord:
    """One layer's slice of a routed sample."""

    address: tuple[int, ...]
    k: int
    phi: np.ndarray
    y: float
    in_tree: bool  # False once the path left the materialized bins


@dataclass(frozen=True)
class RoutedSample:
    """Per-layer (bin, residual feature, residual reward) records."""

    layers: list[LayerRecord]


class PartitionTree:
    """Mutable layered bin tree; one instance backs one oracle fit."""

    def __init__(self, params: LayerParams):
        self.params = params
        self.layers: list[_LayerStore] = []

    # -- construction ------------------------------------------------------

    def _blank_store(self, h: int, addresses: list[tuple[int, ...]],
                     parent: np.ndarray, active: np.ndarray) -> _LayerStore:
        d = self.params.d
        nb = len(addresses)
        k = np.array([a[-1] for a in addresses], dtype=np.int64)
        return _LayerStore(
            h=h,
            addresses=addresses,
            k=k,
            parent=parent,
            child_base=np.full(nb, -1, dtype=np.int64),
            active=active,
            width=self.params.gamma ** (-k.astype(float)),
            c_hat=np.zeros(nb),
            lam_hat=np.zeros((nb, d)),
            Lam_hat=np.zeros((nb, d, d)),
            psi_hat=np.zeros(nb),
            u=np.zeros((nb, d)),
            s=np.zeros(nb),
            theta=np.zeros((nb, d)),
            eps_hat=np.zeros(nb),
            eps_bar=np.zeros(nb),
            ci_const=np.zeros(nb),
            ci_ok=np.zeros(nb, dtype=bool),
            anc_U=[np.zeros((0, d))] * nb,
        )

    def materialize_layer(self, h: int) -> _LayerStore:
        """Create every layer-h bin (children of all partitioning bins).

        Children of bins that failed the CI stage start inactive; they still
        receive noise updates like every other bin on the level.
        """
        if h != len(self.layers) + 1:
            raise ValueError(f"layers must be materialized in order, next is "
                             f"{len(self.layers) + 1}")
        M = self.params.M
        if h == 1:
            addresses = [(k,) for k in range(M + 1)]
            parent = np.full(M + 1, -1, dtype=np.int64)
            active = np.ones(M + 1, dtype=bool)
            store = self._blank_store(h, addresses, parent, active)
        else:
            prev = self.layers[-1]
            if not prev.ci_done:
                raise ValueError("previous layer must be finalized first")
            addresses: list[tuple[int, ...]] = []
            parent_idx: list[int] = []
            active_flags: list[bool] = []
            anc_U: list[np.ndarray] = []
            for p in range(prev.n_bins):
                if prev.k[p] >= M:
                    continue  # non-partitioning: no children
                prev.child_base[p] = len(addresses)
                p_anc = prev.anc_U[p]
                if prev.s[p] > 0.0:
                    p_anc = np.vstack([p_anc, prev.u[p][None, :]])
                for k in range(M + 1):
                    addresses.append(prev.addresses[p] + (k,))
                    parent_idx.append(p)
                    active_flags.append(bool(prev.ci_ok[p]))
                    anc_U.append(p_anc)
            store = self._blank_store(
                h, addresses,
                np.asarray(parent_idx, dtype=np.int64),
                np.asarray(active_flags, dtype=bool),
            )
            store.anc_U = anc_U
        self.layers.append(store)
        return store

    # -- inspection --------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer_bins(self, h: int) -> Iterator[BinNode]:
        """Iterate every materialized bin at layer h."""
        if not (1 <= h <= len(self.layers)):
            raise ValueError(f"layer {h} not materialized")
        store = self.layers[h - 1]
        for i in range(store.n_bins):
            yield BinNode(store, i)

    def bin_at(self, address: tuple[int, ...]) -> BinNode:
        store = self.layers[len(address) - 1]
        idx = store.addresses.index(tuple(address))
        return BinNode(store, idx)

    # -- routing -----------------------------------------------------------

    def route_batch(
        self,
        Phi: np.ndarray,
        Y: np.ndarray | None,
        depth: int,
        want_eta: bool = False,
    ) -> dict[str, np.ndarray]:
        """Vectorized routing of features (and rewards) down to ``depth``.

        Residuals use the fitted directions/slopes of layers < depth, which
        must be finalized.  Rows whose path leaves the materialized bins
        (an ancestor shell index hit M) get bin index -1.  ``want_eta``
        additionally tracks the accumulated parent-chain confidence width
        through layer depth-1.
        """
        Phi_cur = np.array(Phi, dtype=float)
        n = Phi_cur.shape[0]
        Y_cur = None if Y is None else np.clip(np.asarray(Y, dtype=float), -1.0, 1.0)
        eta = np.zeros(n) if want_eta else None
        idx = np.full(n, -1, dtype=np.int64)
        for layer_i in range(depth):
            store = self.layers[layer_i]
            norms = np.linalg.norm(Phi_cur, axis=1)
            k = self.params.shell_index(norms)
            if layer_i == 0:
                idx = np.asarray(k, dtype=np.int64)
            else:
                prev_store = self.layers[layer_i - 1]
                base = np.where(idx >= 0, prev_store.child_base[idx], -1)
                idx = np.where(base >= 0, base + k, -1)
            if layer_i < depth - 1:
                valid = idx >= 0
                safe = np.where(valid, idx, 0)
                if want_eta:
                    u_rows = store.u[safe]
                    proj = np.abs(np.einsum("ij,ij->i", Phi_cur, u_rows))
                    s_rows = store.s[safe]
                    slope = np.divide(
                        proj, np.sqrt(np.where(s_rows > 0, s_rows, 1.0)),
                        out=np.zeros(n), where=s_rows > 0)
                    chi = np.clip(
                        store.ci_const[safe] + store.eps_bar[safe] * slope,
                        0.0, 1.0)
                    grown = np.minimum(1.0, eta + chi)
                    eta = np.where(
                        valid & store.ci_ok[safe], grown,
                        np.where(valid, store.width[safe], eta))
                u_rows = store.u[safe] * valid[:, None]
                theta_rows = store.theta[safe] * valid[:, None]
                if Y_cur is not None:
                    Y_cur = np.clip(
                        Y_cur - np.einsum("ij,ij->i", Phi_cur, theta_rows),
                        -1.0, 1.0)
                coef = np.einsum("ij,ij->i", Phi_cur, u_rows)
                Phi_cur = Phi_cur - coef[:, None] * u_rows
        out = {"idx": idx, "phi": Phi_cur}
        if Y_cur is not None:
            out["y"] = Y_cur
        if want_eta:
            out["eta"] = eta
        return out

    def route_one(
        self, phi: np.ndarray, y: float | None, depth: int, want_eta: bool = False
    ) -> tuple[int, np.ndarray, float | None, float]:
        """Scalar routing fast path; mirrors route_batch for a single sample."""
        phi_cur = np.array(phi, dtype=float)
        y_cur = None if y is None else min(1.0, max(-1.0, float(y)))
        eta = 0.0
        idx = -1
        for layer_i in range(depth):
            store = self.layers[layer_i]
            norm = float(np.linalg.norm(phi_cur))
            k = self.params.shell_index(norm)
            if layer_i == 0:
                idx = int(k)
            elif idx >= 0:
                base = int(self.layers[layer_i - 1].child_base[idx])
                idx = base + int(k) if base >= 0 else -1
            if layer_i < depth - 1 and idx >= 0:
                if want_eta:
                    if store.ci_ok[idx]:
                        s_val = float(store.s[idx])
                        proj = abs(float(phi_cur @ store.u[idx]))
                        slope = proj / math.sqrt(s_val) if s_val > 0.0 else 0.0
                        chi = float(store.ci_const[idx]) + \
                            float(store.eps_bar[idx]) * slope
                        eta = min(1.0, eta + min(1.0, max(0.0, chi)))
                    else:
                        eta = float(store.width[idx])
                u_row = store.u[idx]
                if y_cur is not None:
                    y_cur = min(1.0, max(-1.0, y_cur - float(phi_cur @ store.theta[idx])))
                phi_cur = phi_cur - float(phi_cur @ u_row) * u_row
        return idx, phi_cur, y_cur, eta

    def route(self, phi: np.ndarray, y: float, depth: int | None = None) -> RoutedSample:
        """Route one sample and report every layer's (bin, residual) record."""
        phi = np.asarray(phi, dtype=float)
        if np.linalg.norm(phi) > 1.0 + 1e-9:
            raise ValueError("feature norm exceeds 1 + 1e-9")
        depth = self.depth if depth is None else depth
        records: list[LayerRecord] = []
        phi_cur = np.array(phi, dtype=float)
        y_cur = min(1.0, max(-1.0, float(y)))
        idx = -1
        address: tuple[int, ...] = ()
        for layer_i in range(depth):
            store = self.layers[layer_i]
            norm = float(np.linalg.norm(phi_cur))
            k = int(self.params.shell_index(norm))
            if layer_i == 0:
                idx = k
            elif idx >= 0:
                base = int(self.layers[layer_i - 1].child_base[idx])
                idx = base + k if base >= 0 else -1
            address = address + (k,)
            records.append(LayerRecord(
                address=address, k=k, phi=phi_cur.copy(), y=y_cur,
                in_tree=idx >= 0))
            if layer_i < depth - 1 and idx >= 0:
                u_row = store.u[idx]
                y_cur = min(1.0, max(-1.0, y_cur - float(phi_cur @ store.theta[idx])))
                phi_cur = phi_cur - float(phi_cur @ u_row) * u_row
        return RoutedSample(layers=records)

    # -- persistence -------------------------------------------------------

    def to_json(self) -> str:
        """Dump addresses, statistics and flags for golden-file comparison."""
        payload = []
        for store in self.layers:
            payload.append({
                "layer": store.h,
                "bins": [
                    {
                        "address": list(store.addresses[i]),
                        "c_hat": float(store.c_hat[i]),
                        "psi_hat": float(store.psi_hat[i]),
                        "active": bool(store.active[i]),
                        "ci_ok": bool(store.ci_ok[i]),
                        "s_hat": float(store.s[i]),
                        "u_hat": [float(v) for v in store.u[i]],
                        "theta_hat": [float(v) for v in store.theta[i]],
                        "eps_bar": float(store.eps_bar[i]),
                        "ci_const": float(store.ci_const[i]),
                    }
                    for i in range(store.n_bins)
                ],
            })
        return json.dumps(payload, indent=2)
