"""Synthetic bandit environments and two-point hard estimation designs.

``LinearEnv`` is a finite-context stochastic linear contextual bandit: a
context id is drawn from a categorical law, each (context, action) pair has a
fixed feature vector in the unit ball, and rewards are bounded in [-1, 1]
with mean equal to the feature/parameter inner product.

``HardDesign`` provides the adversarial two-point feature laws used by the
estimation-error experiments: a rare-direction design whose minor coordinate
appears with probability ~ c/sqrt(n), a mirrored small-coordinate design with
minor coordinate ~ n^(-1/3), and the two discussion scenarios with a
(1, +-sqrt(delta)) geometry.  Streams drawn from them are noiseless:
y = phi . theta exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

__all__ = [
    "LinearEnv",
    "HardDesign",
    "TwoPointDesign",
    "sample_period",
    "realize_reward",
    "realize_reward_batch",
    "hard_design_stream",
    "sample_design",
    "mirror_env",
    "random_finite_env",
]

_NOISE_KINDS = ("binary", "uniform", "none")
_DESIGN_KINDS = ("mse_thm1", "mad_thm2", "case1", "case2")


@dataclass(frozen=True, eq=False)
class LinearEnv:
    """Finite-context linear contextual bandit.

    features has shape (n_contexts, n_actions, d); clamp_events counts reward
    realizations that had to be clipped into [-1, 1] (zero for valid specs).
    """

    theta_star: np.ndarray
    features: np.ndarray
    context_probs: np.ndarray
    noise: str = "binary"
    uniform_halfwidth: float = 0.25
    name: str = ""
    clamp_events: np.ndarray = field(
        default_factory=lambda: np.zeros(1, dtype=np.int64))

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta_star",
                           np.asarray(self.theta_star, dtype=float))
        object.__setattr__(self, "features",
                           np.asarray(self.features, dtype=float))
        object.__setattr__(self, "context_probs",
                           np.asarray(self.context_probs, dtype=float))
        if self.noise not in _NOISE_KINDS:
            raise ValueError(f"noise must be one of {_NOISE_KINDS}")
        if self.features.ndim != 3:
            raise ValueError("features must be (n_contexts, n_actions, d)")
        if np.linalg.norm(self.theta_star) > 1.0 + 1e-12:
            raise ValueError("theta_star must lie in the unit ball")
        norms = np.linalg.norm(self.features, axis=2)
        if np.any(norms > 1.0 + 1e-12):
            raise ValueError("every feature must lie in the unit ball")
        p = self.context_probs
        if p.shape != (self.features.shape[0],) or np.any(p < 0.0) \
                or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("context_probs must be a categorical law over "
                             "the contexts")

    @property
    def n_contexts(self) -> int:
        return self.features.shape[0]

    @property
    def n_actions(self) -> int:
        return self.features.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[2]

    @property
    def f_star(self) -> np.ndarray:
        """(n_contexts, n_actions) mean-reward table."""
        return self.features @ self.theta_star

    @property
    def f_opt(self) -> np.ndarray:
        """(n_contexts,) best mean reward per context."""
        return self.f_star.max(axis=1)

    def feature_grid(self) -> np.ndarray:
        """All (context, action) features, flattened to (n_contexts*A, d)."""
        return self.features.reshape(-1, self.d)

    def draw_contexts(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.choice(self.n_contexts, size=size, p=self.context_probs)


def sample_period(
    env: LinearEnv, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Draw one period's context: (per-action features (A, d), best mean)."""
    x = int(env.draw_contexts(1, rng)[0])
    return env.features[x], float(env.f_opt[x])


def realize_reward(env: LinearEnv, phi: np.ndarray, rng: np.random.Generator) -> float:
    """Draw a reward in [-1, 1] with mean phi . theta_star."""
    return float(realize_reward_batch(
        env, np.asarray([np.asarray(phi, dtype=float) @ env.theta_star]), rng)[0])


def realize_reward_batch(
    env: LinearEnv, means: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized reward draws for an array of mean rewards."""
    means = np.asarray(means, dtype=float)
    if env.noise == "none":
        y = means.copy()
    elif env.noise == "binary":
        y = np.where(rng.random(means.shape) < (1.0 + means) / 2.0, 1.0, -1.0)
    else:
        w = env.uniform_halfwidth
        y = means + rng.uniform(-w, w, size=means.shape)
    clipped = np.clip(y, -1.0, 1.0)
    env.clamp_events[0] += int(np.count_nonzero(clipped != y))
    return clipped


# ---------------------------------------------------------------------------
# Environment factories
# ---------------------------------------------------------------------------

def mirror_env(
    c1: float,
    c2: float,
    theta_star: np.ndarray,
    noise: str = "binary",
    name: str = "mirror",
) -> LinearEnv:
    """Two contexts s = +-1, two actions flipping the minor coordinate.

    phi(s, a) = (c1, s*c2) for action 0 and (c1, -s*c2) for action 1, so the
    per-context action gap is 2*c2*|theta_star[1]| everywhere.
    """
    features = np.array([
        [[c1, c2], [c1, -c2]],
        [[c1, -c2], [c1, c2]],
    ])
    return LinearEnv(
        theta_star=np.asarray(theta_star, dtype=float),
        features=features,
        context_probs=np.array([0.5, 0.5]),
        noise=noise,
        name=name,
    )


def random_finite_env(
    n_contexts: int,
    n_actions: int,
    d: int,
    rng: np.random.Generator,
    noise: str = "binary",
    max_norm: float = 0.95,
) -> LinearEnv:
    """Random finite-context env with features and parameter in the ball."""
    raw = rng.normal(size=(n_contexts, n_actions, d))
    norms = np.linalg.norm(raw, axis=2, keepdims=True)
    radii = max_norm * rng.random((n_contexts, n_actions, 1)) ** (1.0 / d)
    features = raw / norms * radii
    theta = rng.normal(size=d)
    theta = theta / np.linalg.norm(theta) * rng.random() ** (1.0 / d)
    probs = rng.random(n_contexts) + 0.2
    return LinearEnv(
        theta_star=theta,
        features=features,
        context_probs=probs / probs.sum(),
        noise=noise,
        name="random_finite",
    )


# ---------------------------------------------------------------------------
# Hard designs
# ---------------------------------------------------------------------------

def _rare_direction_constant(alpha: float) -> float:
    return 1.0 / (4.0 * math.sqrt(2.0) * (math.exp(alpha) - 1.0))


@dataclass(frozen=True)
class TwoPointDesign:
    """Arbitrary two-point feature law with the same surface as HardDesign."""

    points: np.ndarray  # (2, d)
    probs: np.ndarray   # (2,)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        pr = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "probs", pr)
        if pts.ndim != 2 or pts.shape[0] != 2:
            raise ValueError("points must be (2, d)")
        if np.any(np.linalg.norm(pts, axis=1) > 1.0 + 1e-12):
            raise ValueError("support points must lie in the unit ball")
        if pr.shape != (2,) or np.any(pr < 0.0) or abs(pr.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be a two-point law")

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points, self.probs

    def second_moment(self) -> np.ndarray:
        return np.einsum("i,ij,il->jl", self.probs, self.points, self.points)


@dataclass(frozen=True)
class HardDesign:
    """Two-point feature law for the lower-bound experiments.

    kind:
      mse_thm1  phi = e1 w.p. 1 - c/sqrt(n), e2 w.p. c/sqrt(n);
                c = 1/(4*sqrt(2)*(e^alpha - 1)).
      mad_thm2  phi = (1/2, +-c*n^(-1/3)) each w.p. 1/2; c = 0.07.
      case1     phi = e1 w.p. 1 - delta, e2 w.p. delta; delta = min(1, c/sqrt(n)).
      case2     phi = (1, +-sqrt(delta))/sqrt(1 + delta) each w.p. 1/2
                (normalized into the unit ball); delta = min(1, c/sqrt(n)).
    """

    kind: str
    n: int
    alpha: float = 1.0
    c: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _DESIGN_KINDS:
            raise ValueError(f"kind must be one of {_DESIGN_KINDS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if self.c is not None and self.c < 0.0:
            raise ValueError("c must be nonnegative")

    @property
    def constant(self) -> float:
        if self.c is not None:
            return self.c
        if self.kind == "mse_thm1":
            return _rare_direction_constant(self.alpha)
        if self.kind == "mad_thm2":
            return 0.07
        return 1.0

    @property
    def delta_param(self) -> float:
        """The ~ 1/sqrt(n) scale parameter of the discussion scenarios."""
        return min(1.0, self.constant / math.sqrt(self.n))

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        """(support points (2, 2), probabilities (2,)); row 0 is the major point."""
        if self.kind == "mse_thm1":
            p = min(1.0, self.constant / math.sqrt(self.n))
            return np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0 - p, p])
        if self.kind == "mad_thm2":
            b = self.constant * self.n ** (-1.0 / 3.0)
            return np.array([[0.5, b], [0.5, -b]]), np.array([0.5, 0.5])
        if self.kind == "case1":
            dlt = self.delta_param
            return np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0 - dlt, dlt])
        dlt = self.delta_param
        z = math.sqrt(1.0 + dlt)
        r = math.sqrt(dlt)
        return (np.array([[1.0 / z, r / z], [1.0 / z, -r / z]]),
                np.array([0.5, 0.5]))

    def second_moment(self) -> np.ndarray:
        """E[phi phi^T] in closed form from the two-point law."""
        pts, probs = self.support()
        return np.einsum("i,ij,il->jl", probs, pts, pts)

    def theta_candidates(self) -> list[np.ndarray] | None:
        """The two-point hypothesis class, where the construction fixes one."""
        if self.kind == "mse_thm1":
            return [np.array([0.0, 0.0]), np.array([0.0, 1.0])]
        if self.kind == "mad_thm2":
            return [np.array([0.5, 0.0]), np.array([0.5, 0.5])]
        return None


def sample_design(
    design: HardDesign, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw iid features from the design's two-point law."""
    pts, probs = design.support()
    pick = (rng.random(size) < probs[1]).astype(np.int64)
    return pts[pick]


def hard_design_stream(
    design: HardDesign,
    n: int,
    theta: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """n iid (phi, y) rows with noiseless responses y = phi . theta."""
    theta = np.asarray(theta, dtype=float)
    Phi = sample_design(design, n, rng)
    return Phi, Phi @ theta
