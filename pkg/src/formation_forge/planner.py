"""Formation planner: Adam on the weighted surrogate over agent positions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import _kernels
from .costs import CostThresholds, World


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iters_per_cycle: int = 50
    # fresh moments every cycle; warm moments carry gradient scale across cycles
    warm_moments: bool = False

    def __post_init__(self) -> None:
        if self.lr <= 0 or not (0 < self.beta1 < 1) or not (0 < self.beta2 < 1):
            raise ValueError("need lr > 0 and beta1, beta2 in (0, 1)")
        if self.iters_per_cycle < 1:
            raise ValueError("iters_per_cycle must be >= 1")


def adam_step(params, grad, m, v, t: int, hyper: AdamHyper = AdamHyper()):
    """One bias-corrected Adam update; ``t`` is the 1-based step index. Returns ``(params, m, v)``."""
    params, grad = np.asarray(params, dtype=float), np.asarray(grad, dtype=float)
    m = hyper.beta1 * np.asarray(m, dtype=float) + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * np.asarray(v, dtype=float) + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    return params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps), m, v


def adam_minimize(
    fun_grad: Callable[[NDArray], tuple[float, NDArray]],
    x0: ArrayLike,
    hyper: AdamHyper = AdamHyper(),
    iters: int | None = None,
    lower: ArrayLike | None = None,
    upper: ArrayLike | None = None,
    lr_decay: float = 1.0,
) -> tuple[NDArray, float]:
    """Generic projected Adam with best-iterate tracking, for arbitrary objectives.

    ``lr_decay`` multiplies the step size every iteration; values below 1 let
    the iterates settle instead of hovering at the ``lr`` scale.
    """
    x = np.array(x0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    val, g = fun_grad(x)
    best_x, best_val = x.copy(), val
    lr = hyper.lr
    for t in range(1, (iters or hyper.iters_per_cycle) + 1):
        x, m, v = adam_step(x, g, m, v, t, replace(hyper, lr=lr))
        if lower is not None or upper is not None:
            x = np.clip(x, lower, upper)
        val, g = fun_grad(x)
        if val < best_val:
            best_x, best_val = x.copy(), val
        lr *= lr_decay
    return best_x, best_val


@dataclass
class PlannerState:
    """Warm-start positions and Adam moments; one instance per trial."""

    planned_positions: NDArray[np.float64]
    hyper: AdamHyper = AdamHyper()
    adam_m: NDArray[np.float64] = field(default=None)  # type: ignore[assignment]
    adam_v: NDArray[np.float64] = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self) -> None:
        self.planned_positions = np.array(self.planned_positions, dtype=np.float64).reshape(-1, 2)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.planned_positions)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.planned_positions)


@dataclass(frozen=True)
class PlanResult:
    positions: NDArray[np.float64]
    surrogate_value: float
    start_value: float
    ok: bool


def arena_box(width: float, height: float, radius: float) -> tuple[NDArray, NDArray]:
    return np.array([radius, radius]), np.array([width - radius, height - radius])


def plan_formation(
    planner: PlannerState,
    alpha: ArrayLike,
    world: World,
    bounds: tuple[NDArray, NDArray],
    thresholds: CostThresholds = CostThresholds(),
) -> tuple[PlannerState, PlanResult]:
    """Run one planning cycle from the previous plan.

    Only the agents move; payload, threats and obstacles are parameters.
    The best iterate (including the warm start) is returned, so the surrogate
    never increases across a cycle. A non-finite gradient aborts the cycle and
    keeps the previous plan.
    """
    hyper = planner.hyper
    x0 = np.clip(planner.planned_positions, bounds[0], bounds[1])
    if hyper.warm_moments:
        m, v, t0 = planner.adam_m.copy(), planner.adam_v.copy(), planner.step_count
    else:
        m, v, t0 = np.zeros_like(x0), np.zeros_like(x0), 0
    best_x, best_val, start_val, t, status = _kernels.plan_adam(
        x0, np.asarray(alpha, dtype=np.float64), world.payload, world.threats, world.obstacles,
        thresholds.zeta, thresholds.neighbour_r2, world.mask,
        hyper.lr, hyper.beta1, hyper.beta2, hyper.eps, hyper.iters_per_cycle,
        np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float), m, v, t0,
    )
    ok = status == 0 and math.isfinite(start_val)
    if not ok:
        prev = planner.planned_positions
        return planner, PlanResult(prev, start_val, start_val, False)
    new_state = PlannerState(best_x, hyper, m, v, t)
    return new_state, PlanResult(best_x, best_val, start_val, True)
