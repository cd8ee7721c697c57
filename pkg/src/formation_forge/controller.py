"""Displacement controller, shape templates and the velocity safety filter.

Per edge ``i -> j`` the controller asks for ``u_i - u_j = -e_ij`` (agent head)
or ``u_i = s_dot_j - e_ij`` (uncontrollable head). With edge-by-node incidence
blocks ``B1`` (agents) and ``B2`` (everything else) this is
``B1 u = -e - B2 s_dot``, solved in the least-squares sense. Along exact
solutions every edge error obeys ``de/dt = -e``, so ``V = 1/2 sum |e|^2``
decays as ``exp(-2t)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import (
    BOX_HALF_SIDE,
    EntityState,
    FormationGraph,
    build_incidence,
    canonical_order,
    check_determined,
    displacement_errors,
)

V_MAX = 0.2


class ControllerError(RuntimeError):
    """The stacked edge conditions do not determine every agent input."""


@dataclass(frozen=True)
class ControlCommand:
    velocities: NDArray[np.float64]
    saturated: NDArray[np.bool_]
    filtered: NDArray[np.bool_] | None = None


def saturate(u: ArrayLike, v_max: float = V_MAX) -> tuple[NDArray, NDArray]:
    """Scale each row to norm ``<= v_max`` keeping its direction."""
    u = np.asarray(u, dtype=float)
    speed = np.linalg.norm(u, axis=1)
    scale = np.minimum(1.0, v_max / np.maximum(speed, 1e-300))
    return u * scale[:, None], speed > v_max


def _undetermined_agents(B1: NDArray, agent_ids: Sequence[int]) -> list[int]:
    # agents whose component in the agent-agent graph has no edge to an uncontrollable entity
    n = len(agent_ids)
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    anchored = set()
    for row in B1:
        cols = np.flatnonzero(row)
        if len(cols) == 2:
            parent[find(cols[0])] = find(cols[1])
    for row in B1:
        cols = np.flatnonzero(row)
        if len(cols) == 1:
            anchored.add(find(cols[0]))
    return [agent_ids[k] for k in range(n) if find(k) not in anchored]


def solve_inputs(B1: NDArray, B2: NDArray, errors: NDArray, s_dot: NDArray) -> NDArray:
    """Least-squares agent velocities for ``B1 u = -e - B2 s_dot``; shape ``(n_agents, 2)``."""
    rhs = -errors - (B2 @ s_dot if B2.shape[1] else 0.0)
    return np.linalg.lstsq(B1, rhs, rcond=None)[0]


def compute_control(
    graph: FormationGraph,
    entities: Sequence[EntityState],
    uncontrollable_velocities: Mapping[int, ArrayLike] | None = None,
    v_max: float = V_MAX,
) -> ControlCommand:
    """Velocities for the agents (canonical order), saturated to ``v_max``.

    Uncontrollable velocities default to each entity's recorded velocity.
    """
    check_determined(graph, entities)
    inc = build_incidence(graph, entities)
    if np.linalg.matrix_rank(inc.B1) < inc.B1.shape[1]:
        missing = _undetermined_agents(inc.B1, inc.agent_ids)
        raise ControllerError(f"agents {missing} are not connected to any uncontrollable entity")
    errors = displacement_errors(graph, entities)
    by_id = {e.id: e for e in entities}
    overrides = uncontrollable_velocities or {}
    s_dot = np.array(
        [overrides.get(i, by_id[i].velocity) for i in inc.other_ids], dtype=float
    ).reshape(-1, 2)
    u, sat = saturate(solve_inputs(inc.B1, inc.B2, errors, s_dot), v_max)
    return ControlCommand(u, sat)


def lyapunov_value(graph: FormationGraph, entities: Sequence[EntityState]) -> float:
    e = displacement_errors(graph, entities)
    return 0.5 * float(np.sum(e * e))


class DisplacementController:
    """Array fast path for a fixed graph: the pseudo-inverse of ``B1`` is computed once."""

    def __init__(self, graph: FormationGraph, entities: Sequence[EntityState], v_max: float = V_MAX):
        check_determined(graph, entities)
        inc = build_incidence(graph, entities)
        if np.linalg.matrix_rank(inc.B1) < inc.B1.shape[1]:
            missing = _undetermined_agents(inc.B1, inc.agent_ids)
            raise ControllerError(f"agents {missing} are not connected to any uncontrollable entity")
        self.graph = graph
        self.incidence = inc
        self.B = inc.B
        self.pinv = np.linalg.pinv(inc.B1)
        self.v_max = v_max
        ordered = canonical_order(entities)
        self.agent_index = {e.id: k for k, e in enumerate(ordered) if e.controllable}
        self.node_index = {e.id: k for k, e in enumerate(ordered)}

    def errors(self, nodes: NDArray, desired: NDArray) -> NDArray:
        """``nodes`` are all positions in canonical order."""
        return self.B @ nodes - desired

    def command(self, nodes: NDArray, desired: NDArray, s_dot: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        """Return ``(u_saturated, saturated_flags, edge_errors)``."""
        e = self.errors(nodes, desired)
        rhs = -e - self.incidence.B2 @ s_dot
        u, sat = saturate(self.pinv @ rhs, self.v_max)
        return u, sat, e


def displacements_from_targets(graph: FormationGraph, targets: Mapping[int, ArrayLike] | NDArray,
                               positions: Mapping[int, ArrayLike]) -> NDArray:
    """Desired per-edge displacements: ``target_i - target_j`` or ``target_i - s_j``.

    ``targets`` maps agent id to desired position; ``positions`` supplies the
    current position of uncontrollable heads.
    """
    out = np.zeros((len(graph.edges), 2))
    for k, (t, h, ctrl) in enumerate(graph.edges):
        head = targets[h] if ctrl else positions[h]
        out[k] = np.asarray(targets[t], dtype=float) - np.asarray(head, dtype=float)
    return out


# ---------------------------------------------------------------------------
# shape templates for the fixed-shape baselines


@dataclass(frozen=True)
class ShapeTemplate:
    offsets: NDArray[np.float64]
    name: str = "box"

    def __post_init__(self) -> None:
        off = np.array(self.offsets, dtype=float).reshape(-1, 2)
        for a, b in itertools.combinations(range(len(off)), 2):
            if np.allclose(off[a], off[b]):
                raise ValueError(f"template offsets {a} and {b} coincide")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    @classmethod
    def box(cls, n_agents: int = 4, half_side: float = BOX_HALF_SIDE) -> "ShapeTemplate":
        corners = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float) * half_side
        # extra agents go on a larger concentric box
        offs = [corners[k % 4] * (1 + k // 4) for k in range(n_agents)]
        return cls(np.array(offs), "box")


def fs_targets(leader_position: ArrayLike, template: ShapeTemplate) -> NDArray:
    """World-frame template offsets around the leader."""
    return np.asarray(leader_position, dtype=float) + template.offsets


def af_targets(leader_position: ArrayLike, leader_heading: float, template: ShapeTemplate) -> NDArray:
    """Template rotated by the leader heading, then translated to the leader."""
    c, s = np.cos(leader_heading), np.sin(leader_heading)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(leader_position, dtype=float) + template.offsets @ rot.T


# ---------------------------------------------------------------------------
# safety filter


def _project_cone(u: NDArray, normals: list[NDArray]) -> NDArray:
    """Closest velocity to ``u`` with ``u . n <= 0`` for every unit normal ``n`` (2-D)."""
    def feasible(c: NDArray) -> bool:
        return all(c @ n <= 1e-12 for n in normals)

    if feasible(u):
        return u
    candidates = [u - max(u @ n, 0.0) * n for n in normals]
    candidates = [c for c in candidates if feasible(c)]
    if not candidates:
        return np.zeros(2)
    return min(candidates, key=lambda c: float(np.sum((c - u) ** 2)))


def safety_filter(
    velocities: ArrayLike,
    agents: ArrayLike,
    hazards: ArrayLike,
    margin: float,
) -> tuple[NDArray, NDArray]:
    """Remove velocity components that approach anything closer than ``margin``.

    ``hazards`` are static positions (obstacles and, by default, threats);
    other agents count as well. Returns ``(velocities, filtered_flags)``.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    u = np.array(velocities, dtype=float).reshape(-1, 2)
    agents = np.asarray(agents, dtype=float).reshape(-1, 2)
    hazards = np.asarray(hazards, dtype=float).reshape(-1, 2)
    flags = np.zeros(len(agents), dtype=bool)
    out = u.copy()
    for i, x in enumerate(agents):
        others = np.vstack([hazards, np.delete(agents, i, axis=0)])
        d = others - x
        dist = np.linalg.norm(d, axis=1)
        near = (dist < margin) & (dist > 1e-12)
        if not near.any():
            continue
        normals = [d[k] / dist[k] for k in np.flatnonzero(near)]
        out[i] = _project_cone(u[i], normals)
        flags[i] = not np.array_equal(out[i], u[i])
    return out, flags
