"""True costs and the five surrogate basis functions.

True costs are only ever evaluated. Basis functions come with analytic
gradients with respect to the agent positions, stacked as
``[x_0, y_0, x_1, y_1, ...]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from numpy.typing import ArrayLike, NDArray

from . import _kernels
from .core import EntityKind, Environment

OBSTACLE_CLAMP = 1e-3
BASIS_NAMES = ("proximity", "protection", "obstacle", "agent_avoid", "payload_avoid")


@dataclass(frozen=True)
class CostThresholds:
    tau_p: float = -0.5
    tau_o: float = 0.2
    zeta: float = 10.0
    # neighbourhood radius for the pairwise basis sums; None = all pairs
    sensing_radius: float | None = None

    def __post_init__(self) -> None:
        if self.tau_o <= 0 or self.zeta <= 0:
            raise ValueError("tau_o and zeta must be positive")
        if not -1.0 <= self.tau_p <= 1.0:
            raise ValueError("tau_p must lie in [-1, 1]")
        if self.sensing_radius is not None and self.sensing_radius <= 0:
            raise ValueError("sensing_radius must be positive")

    @property
    def neighbour_r2(self) -> float:
        return math.inf if self.sensing_radius is None else self.sensing_radius**2


@dataclass(frozen=True)
class World:
    """Array snapshot of an arena: agents ``(n, 2)``, payload ``(2,)``, threats, obstacles.

    ``threat_mask[i, j]`` marks threat ``j`` as a neighbour of agent ``i`` in
    the protection basis; ``None`` means every pair.
    """

    agents: NDArray[np.float64]
    payload: NDArray[np.float64]
    threats: NDArray[np.float64]
    obstacles: NDArray[np.float64]
    threat_mask: NDArray[np.bool_] | None = None

    @classmethod
    def of(cls, agents: ArrayLike, payload: ArrayLike, threats: ArrayLike = (), obstacles: ArrayLike = (),
           threat_mask: ArrayLike | None = None) -> "World":
        mask = None if threat_mask is None else np.asarray(threat_mask, dtype=bool)
        return cls(_pts(agents), np.asarray(payload, dtype=np.float64).reshape(2), _pts(threats), _pts(obstacles), mask)

    @property
    def mask(self) -> NDArray[np.bool_]:
        if self.threat_mask is None:
            return np.ones((len(self.agents), len(self.threats)), dtype=bool)
        return self.threat_mask

    @classmethod
    def from_environment(cls, env: Environment) -> "World":
        return cls(
            env.positions(EntityKind.AGENT),
            env.positions(EntityKind.PAYLOAD)[0],
            env.positions(EntityKind.THREAT),
            env.positions(EntityKind.OBSTACLE),
        )

    def with_agents(self, agents: ArrayLike) -> "World":
        return World(_pts(agents), self.payload, self.threats, self.obstacles, self.threat_mask)

    def with_mask(self, threat_mask: ArrayLike | None) -> "World":
        mask = None if threat_mask is None else np.asarray(threat_mask, dtype=bool)
        return World(self.agents, self.payload, self.threats, self.obstacles, mask)


def _pts(a: ArrayLike) -> NDArray[np.float64]:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 2))


class TrueCost(enum.Enum):
    PROTECTION = "P"
    OBSTACLE = "O"
    VIOLATION = "V"


def los(a: ArrayLike, b: ArrayLike) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 if either is (near) zero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(_kernels.los(a[0], a[1], b[0], b[1]))


def _los_rows(a: NDArray, b: NDArray) -> NDArray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na >= _kernels.LOS_EPS) & (nb >= _kernels.LOS_EPS)
    dot = np.sum(a * b, axis=-1)
    return np.where(ok, dot / np.where(ok, na * nb, 1.0), 0.0)


def min_los_per_threat(agents: ArrayLike, threats: ArrayLike, payload: ArrayLike) -> NDArray[np.float64]:
    agents, threats = _pts(agents), _pts(threats)
    payload = np.asarray(payload, dtype=float).reshape(2)
    if len(threats) == 0:
        return np.zeros(0)
    # [threat, agent]
    a = threats[:, None, :] - agents[None, :, :]
    b = (payload - agents)[None, :, :]
    return _los_rows(a, np.broadcast_to(b, a.shape)).min(axis=1)


def true_protection_cost(agents: ArrayLike, threats: ArrayLike, payload: ArrayLike) -> float:
    """Sum over threats of the best (lowest) line-of-sight value among agents."""
    return float(min_los_per_threat(agents, threats, payload).sum())


def _agent_obstacle_distances(agents: ArrayLike, obstacles: ArrayLike) -> NDArray:
    agents, obstacles = _pts(agents), _pts(obstacles)
    return np.linalg.norm(obstacles[:, None, :] - agents[None, :, :], axis=-1)


def true_obstacle_cost(agents: ArrayLike, obstacles: ArrayLike) -> float:
    d = _agent_obstacle_distances(agents, obstacles)
    return float(np.sum(1.0 / np.maximum(d, OBSTACLE_CLAMP)))


def violation_cost(agents, threats, obstacles, payload, thresholds: CostThresholds = CostThresholds()) -> float:
    unprotected = int(np.count_nonzero(min_los_per_threat(agents, threats, payload) > thresholds.tau_p))
    too_close = int(np.count_nonzero(_agent_obstacle_distances(agents, obstacles) < thresholds.tau_o))
    return float(unprotected + too_close)


def true_costs(world: World, thresholds: CostThresholds = CostThresholds()) -> dict[TrueCost, float]:
    return {
        TrueCost.PROTECTION: true_protection_cost(world.agents, world.threats, world.payload),
        TrueCost.OBSTACLE: true_obstacle_cost(world.agents, world.obstacles),
        TrueCost.VIOLATION: violation_cost(world.agents, world.threats, world.obstacles, world.payload, thresholds),
    }


def true_cost(world: World, which: TrueCost, thresholds: CostThresholds = CostThresholds()) -> float:
    if which is TrueCost.PROTECTION:
        return true_protection_cost(world.agents, world.threats, world.payload)
    if which is TrueCost.OBSTACLE:
        return true_obstacle_cost(world.agents, world.obstacles)
    return violation_cost(world.agents, world.threats, world.obstacles, world.payload, thresholds)


# ---------------------------------------------------------------------------
# basis functions


def _terms(world: World, thresholds: CostThresholds) -> tuple[NDArray, NDArray]:
    grad = np.zeros((len(world.agents), 2, 5))
    f = _kernels.basis_terms(
        world.agents, world.payload, world.threats, world.obstacles,
        thresholds.zeta, thresholds.neighbour_r2, world.mask, grad,
    )
    return f, grad


def basis_vector(world: World, thresholds: CostThresholds = CostThresholds()) -> NDArray[np.float64]:
    """``[f1 proximity, f2 protection, f3 obstacle, f4 agent-avoid, f5 payload-avoid]``."""
    return _terms(world, thresholds)[0]


def basis_gradient(world: World, thresholds: CostThresholds = CostThresholds()) -> NDArray[np.float64]:
    """Jacobian of ``basis_vector`` w.r.t. stacked agent coordinates, shape ``(2n, 5)``."""
    grad = _terms(world, thresholds)[1]
    return grad.reshape(-1, 5)


def assign_threats(agents: ArrayLike, threats: ArrayLike, payload: ArrayLike) -> NDArray[np.bool_]:
    """Neighbourhood mask giving each threat to one agent, distinct agents where possible.

    Minimises the summed line-of-sight value of the assigned pairs, i.e. each
    threat goes to the agent currently best placed to block it. With more
    threats than agents the leftovers go to their individually best agent.
    """
    agents, threats = _pts(agents), _pts(threats)
    payload = np.asarray(payload, dtype=float).reshape(2)
    n, m = len(agents), len(threats)
    mask = np.zeros((n, m), dtype=bool)
    if n == 0 or m == 0:
        return mask
    a = threats[None, :, :] - agents[:, None, :]
    b = np.broadcast_to((payload - agents)[:, None, :], a.shape)
    cost = _los_rows(a, b)
    rows, cols = linear_sum_assignment(cost)
    mask[rows, cols] = True
    for j in set(range(m)) - set(cols.tolist()):
        mask[int(np.argmin(cost[:, j])), j] = True
    return mask


def basis_proximity(agents, payload) -> float:
    return basis_vector(World.of(agents, payload))[0]


def basis_protection(agents, threats, payload, thresholds: CostThresholds = CostThresholds()) -> float:
    return basis_vector(World.of(agents, payload, threats=threats), thresholds)[1]


def basis_obstacle(agents, obstacles, thresholds: CostThresholds = CostThresholds()) -> float:
    # the payload only enters f1/f5, any placeholder works here
    return basis_vector(World.of(agents, (0.0, 0.0), obstacles=obstacles), thresholds)[2]


def basis_agent_avoid(agents, thresholds: CostThresholds = CostThresholds()) -> float:
    return basis_vector(World.of(agents, (0.0, 0.0)), thresholds)[3]


def basis_payload_avoid(agents, payload, thresholds: CostThresholds = CostThresholds()) -> float:
    return basis_vector(World.of(agents, payload), thresholds)[4]
