"""Adaptive surrogate cost: forgetting statistics, simplex weight fit, gating.

The surrogate is ``alpha . f(x)`` with ``alpha`` on the simplex. Observed
samples ``(f, c*)`` are folded into ``R = sum w_i f_i f_i^T``,
``p = sum w_i f_i c*_i`` and ``y = sum w_i c*_i^2`` so the weighted
least-squares objective ``a^T R a - 2 a^T p + y`` never needs the sample
matrix itself.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .costs import CostThresholds, World, basis_gradient

N_BASIS = 5
ALPHA_MIN = 1e-4
KKT_TOL = 1e-8


class EstimationError(RuntimeError):
    """The constrained weight solve found no KKT point."""


@dataclass(frozen=True)
class BasisSample:
    f: NDArray[np.float64]
    c_star: float
    timestamp: int = 0

    def __post_init__(self) -> None:
        f = np.asarray(self.f, dtype=np.float64).reshape(-1)
        if not (np.all(np.isfinite(f)) and math.isfinite(self.c_star)):
            raise ValueError("basis sample must be finite")
        object.__setattr__(self, "f", f)


@dataclass(frozen=True)
class SurrogateModel:
    alpha: NDArray[np.float64] = field(default_factory=lambda: np.full(N_BASIS, 1.0 / N_BASIS))
    R: NDArray[np.float64] = field(default_factory=lambda: np.zeros((N_BASIS, N_BASIS)))
    p: NDArray[np.float64] = field(default_factory=lambda: np.zeros(N_BASIS))
    y: float = 0.0
    sample_count: int = 0

    @property
    def n_basis(self) -> int:
        return len(self.alpha)

    @classmethod
    def empty(cls, n_basis: int = N_BASIS) -> "SurrogateModel":
        return cls(np.full(n_basis, 1.0 / n_basis), np.zeros((n_basis, n_basis)), np.zeros(n_basis), 0.0, 0)

    def fit_residual(self, alpha: ArrayLike | None = None) -> float:
        """Weighted squared residual ``||F a - c*||_W^2`` from the running statistics."""
        a = self.alpha if alpha is None else np.asarray(alpha, dtype=float)
        return float(max(a @ self.R @ a - 2.0 * a @ self.p + self.y, 0.0))


def surrogate_value(model: SurrogateModel, f: ArrayLike) -> float:
    return float(np.dot(model.alpha, np.asarray(f, dtype=float)))


def update_statistics(model: SurrogateModel, sample: BasisSample, w: float = 1.0) -> SurrogateModel:
    """Forgetting update ``R <- w (R + f f^T)`` and likewise for ``p`` and ``y``."""
    if not 0.0 <= w <= 1.0:
        raise ValueError("forgetting factor must lie in [0, 1]")
    f, c = sample.f, sample.c_star
    return replace(
        model,
        R=w * (model.R + np.outer(f, f)),
        p=w * (model.p + f * c),
        y=w * (model.y + c * c),
        sample_count=model.sample_count + 1,
    )


# ---------------------------------------------------------------------------
# constrained weight solve


def kkt_residual(R: NDArray, p: NDArray, alpha: NDArray, alpha_min: float = ALPHA_MIN) -> float:
    """Scaled KKT violation for ``min a^T R a - 2 a^T p`` on ``{sum a = 1, a >= alpha_min}``."""
    g = 2.0 * (R @ alpha - p)
    scale = 1.0 + np.abs(R).max() + np.abs(p).max()
    free = alpha > alpha_min + 1e-12
    nu = -g[free].mean() if free.any() else -g.min()
    stat = np.abs(g[free] + nu).max(initial=0.0)
    dual = np.maximum(-(g[~free] + nu), 0.0).max(initial=0.0)
    primal = max(abs(alpha.sum() - 1.0), max(alpha_min - alpha.min(), 0.0))
    return float(max(stat / scale, dual / scale, primal))


def solve_weights(model: SurrogateModel, alpha_min: float = ALPHA_MIN) -> NDArray[np.float64]:
    """Minimise the weighted fit over the simplex with ``alpha >= alpha_min``.

    The problem is a convex QP in a handful of variables, so every face of the
    feasible set is tried: fix a subset at the lower bound, solve the equality
    constrained KKT system for the rest and keep the best candidate that
    satisfies the full KKT conditions. Rank-deficient ``R`` is handled through
    least-squares solves of the KKT systems.
    """
    return solve_simplex_qp(model.R, model.p, alpha_min)


def solve_simplex_qp(R: ArrayLike, p: ArrayLike, alpha_min: float = ALPHA_MIN) -> NDArray[np.float64]:
    R = np.asarray(R, dtype=float)
    p = np.asarray(p, dtype=float)
    n = len(p)
    if n * alpha_min >= 1.0:
        raise ValueError("alpha_min too large for the simplex")
    R = 0.5 * (R + R.T)
    best, best_obj = None, math.inf
    for k in range(n, 0, -1):
        for free in itertools.combinations(range(n), k):
            free = list(free)
            bound = [i for i in range(n) if i not in free]
            K = np.zeros((k + 1, k + 1))
            K[:k, :k] = 2.0 * R[np.ix_(free, free)]
            K[:k, k] = 1.0
            K[k, :k] = 1.0
            rhs = np.empty(k + 1)
            rhs[:k] = 2.0 * (p[free] - alpha_min * R[np.ix_(free, bound)].sum(axis=1))
            rhs[k] = 1.0 - alpha_min * len(bound)
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            if sol[:k].min() < alpha_min - 1e-10:
                continue
            alpha = np.full(n, alpha_min)
            alpha[free] = np.maximum(sol[:k], alpha_min)
            if kkt_residual(R, p, alpha, alpha_min) >= KKT_TOL:
                continue
            obj = alpha @ R @ alpha - 2.0 * alpha @ p
            if obj < best_obj - 1e-15 * (1 + abs(obj)):
                best, best_obj = alpha, obj
    if best is None:
        raise EstimationError("no face of the simplex satisfied the KKT conditions")
    return best


# ---------------------------------------------------------------------------
# gating (formation planning with adaptive weights)


@dataclass(frozen=True)
class AdaptiveConfig:
    tau_c: float = 1e-3
    tau_e_per_sample: float = 0.05
    l_w: float = 0.5
    u_w: float = 0.99
    l_tau_x: float = 0.01
    u_tau_x: float = 0.1
    w0: float = 0.95
    tau_x0: float = 0.05
    alpha_min: float = ALPHA_MIN

    def __post_init__(self) -> None:
        if not (0 <= self.l_w < self.u_w <= 1):
            raise ValueError("need 0 <= l_w < u_w <= 1")
        if not (0 < self.l_tau_x < self.u_tau_x):
            raise ValueError("need 0 < l_tau_x < u_tau_x")
        if self.tau_c <= 0 or self.tau_e_per_sample <= 0 or self.tau_x0 <= 0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class AdaptiveState:
    """Gate flag, thresholds and the reference sample novelty is measured against."""

    accept: bool = True
    w: float = 0.95
    tau_x: float = 0.05
    config: AdaptiveConfig = AdaptiveConfig()
    ref_c_star: float | None = None
    ref_positions: NDArray[np.float64] | None = None
    last_residual: float = math.nan

    @classmethod
    def initial(cls, config: AdaptiveConfig = AdaptiveConfig()) -> "AdaptiveState":
        return cls(True, config.w0, config.tau_x0, config)

    @property
    def tau_c(self) -> float:
        return self.config.tau_c

    def tau_e(self, sample_count: int) -> float:
        return self.config.tau_e_per_sample * sample_count


@dataclass(frozen=True)
class StepOutcome:
    admitted: bool
    adopted: bool
    candidate: NDArray[np.float64] | None
    residual: float


def adaptive_step(
    state: AdaptiveState,
    model: SurrogateModel,
    f: ArrayLike,
    positions: ArrayLike,
    c_star: float,
    timestamp: int = 0,
) -> tuple[AdaptiveState, SurrogateModel, StepOutcome]:
    """Admit ``(f, c*)`` if it is novel, refit, and adopt the fit if it is good enough.

    Novelty is ``|c* - c*_ref| > tau_c`` and ``||x - x_ref|| > tau_x`` where the
    reference is the last admitted sample (the first call only sets it).
    A candidate is adopted once more than ``n_basis`` samples were admitted and
    its weighted residual is below ``tau_e``.
    """
    x = np.asarray(positions, dtype=float).reshape(-1)
    if state.ref_c_star is None:
        return replace(state, ref_c_star=float(c_star), ref_positions=x.copy()), model, StepOutcome(False, False, None, math.nan)

    novel = (
        state.accept
        and abs(c_star - state.ref_c_star) > state.tau_c
        and float(np.linalg.norm(x - state.ref_positions)) > state.tau_x
    )
    if not novel:
        return state, model, StepOutcome(False, False, None, state.last_residual)

    model = update_statistics(model, BasisSample(f, float(c_star), timestamp), state.w)
    state = replace(state, ref_c_star=float(c_star), ref_positions=x.copy())
    try:
        candidate = solve_weights(model, state.config.alpha_min)
    except EstimationError:
        return state, model, StepOutcome(True, False, None, math.nan)
    residual = model.fit_residual(candidate)
    state = replace(state, last_residual=residual)
    adopted = model.sample_count > model.n_basis and residual < state.tau_e(model.sample_count)
    if adopted:
        model = replace(model, alpha=candidate)
    return state, model, StepOutcome(True, adopted, candidate, residual)


def validation_update(
    state: AdaptiveState,
    c_star_next: float,
    c_star_t: float,
    c_next: float,
    c_t: float,
    rng: np.random.Generator,
) -> AdaptiveState:
    """Re-open the gate with fresh ``w`` and ``tau_x`` when the surrogate fell but the true cost did not."""
    if c_star_next >= c_star_t and c_next <= c_t:
        cfg = state.config
        w = float(rng.uniform(cfg.l_w, cfg.u_w))
        tau_x = float(rng.uniform(cfg.l_tau_x, cfg.u_tau_x))
        return replace(state, accept=True, w=w, tau_x=tau_x)
    return replace(state, accept=False)


# ---------------------------------------------------------------------------
# linear-dependence diagnostic


SIGMA_TOL = 1e-6


@dataclass(frozen=True)
class DependenceReport:
    sigma_min: float
    independent: bool
    status: str


def dependence_from_jacobian(A: ArrayLike, tol: float = SIGMA_TOL) -> DependenceReport:
    """Smallest singular value of the basis-gradient matrix ``A`` (rows = coordinates)."""
    A = np.asarray(A, dtype=float)
    rows, cols = A.shape
    if rows < cols:
        s = np.linalg.svd(A, compute_uv=False)
        smin = 0.0 if len(s) < cols else float(s[-1])
        return DependenceReport(smin, False, f"{rows} coordinates < {cols} basis functions: gradients always dependent")
    smin = float(np.linalg.svd(A, compute_uv=False)[-1])
    if smin > tol:
        return DependenceReport(smin, True, "independent")
    return DependenceReport(smin, False, "dependent gradients: re-estimating weights may not move the plan")


def dependence_diagnostic(world: World, thresholds: CostThresholds = CostThresholds()) -> DependenceReport:
    return dependence_from_jacobian(basis_gradient(world, thresholds))


def tangent_sigma_min(A: ArrayLike, rows: ArrayLike | None = None) -> float:
    """Smallest singular value of ``A`` on the simplex tangent space ``{d : sum(d) = 0}``.

    At an interior stationary point of ``alpha^T f`` the gradient matrix
    satisfies ``A alpha = 0``, so the plain ``sigma_min(A)`` is zero there.
    Weight changes are tangent to the simplex, and the first-order plan shift
    is ``-H^{-1} A d``; this is the quantity that bounds it away from zero.
    ``rows`` optionally keeps only coordinates that are free of bound constraints.
    """
    A = np.asarray(A, dtype=float)
    if rows is not None:
        A = A[np.asarray(rows)]
    n = A.shape[1]
    # orthonormal basis of the sum-zero subspace
    U = np.linalg.svd(np.ones((1, n)))[2][1:].T
    s = np.linalg.svd(A @ U, compute_uv=False)
    return float(s[-1]) if len(s) == n - 1 else 0.0
