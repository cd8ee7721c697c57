"""Geometry, entities, environments and formation graphs.

Positions live in an arena ``[0, width] x [0, height]`` (meters). Entity
ordering is canonical everywhere: agents by ascending id, then the payload,
then threats, then obstacles.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

Vec2 = tuple[float, float]

DEFAULT_RADIUS = 0.08
BOX_HALF_SIDE = 0.3


class StructuralError(ValueError):
    """A formation graph does not match the entities it refers to."""


class EnvironmentGenerationError(RuntimeError):
    """Random placement ran out of retries."""


class EntityKind(enum.Enum):
    AGENT = "agent"
    PAYLOAD = "payload"
    THREAT = "threat"
    OBSTACLE = "obstacle"


_KIND_ORDER = {
    EntityKind.AGENT: 0,
    EntityKind.PAYLOAD: 1,
    EntityKind.THREAT: 2,
    EntityKind.OBSTACLE: 3,
}


def _vec2(v: Iterable[float], what: str) -> Vec2:
    x, y = (float(c) for c in v)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError(f"{what} must be finite, got ({x}, {y})")
    return (x, y)


@dataclass(frozen=True)
class EntityState:
    id: int
    kind: EntityKind
    position: Vec2
    velocity: Vec2 = (0.0, 0.0)
    radius: float = DEFAULT_RADIUS

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", _vec2(self.position, "position"))
        object.__setattr__(self, "velocity", _vec2(self.velocity, "velocity"))
        if self.radius < 0:
            raise ValueError("radius must be >= 0")
        if self.kind in (EntityKind.THREAT, EntityKind.OBSTACLE) and self.velocity != (0.0, 0.0):
            raise ValueError(f"{self.kind.value} entities are static")

    @property
    def controllable(self) -> bool:
        return self.kind is EntityKind.AGENT


def canonical_order(entities: Sequence[EntityState]) -> list[EntityState]:
    return sorted(entities, key=lambda e: (_KIND_ORDER[e.kind], e.id))


@dataclass(frozen=True)
class Environment:
    width: float = 3.2
    height: float = 2.0
    entities: tuple[EntityState, ...] = ()
    waypoints: tuple[Vec2, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "entities", tuple(canonical_order(self.entities)))
        object.__setattr__(self, "waypoints", tuple(_vec2(w, "waypoint") for w in self.waypoints))
        ids = [e.id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise ValueError("entity ids must be unique")
        n_payload = sum(e.kind is EntityKind.PAYLOAD for e in self.entities)
        if self.entities and n_payload != 1:
            raise ValueError(f"exactly one payload required, got {n_payload}")
        for e in self.entities:
            x, y = e.position
            if not (0.0 <= x <= self.width and 0.0 <= y <= self.height):
                raise ValueError(f"entity {e.id} at {e.position} lies outside the arena")

    def of_kind(self, kind: EntityKind) -> list[EntityState]:
        return [e for e in self.entities if e.kind is kind]

    @property
    def agents(self) -> list[EntityState]:
        return self.of_kind(EntityKind.AGENT)

    @property
    def payload(self) -> EntityState:
        return self.of_kind(EntityKind.PAYLOAD)[0]

    def positions(self, kind: EntityKind) -> NDArray[np.float64]:
        pts = [e.position for e in self.of_kind(kind)]
        return np.array(pts, dtype=np.float64).reshape(len(pts), 2)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "entities": [
                {"id": e.id, "kind": e.kind.value, "x": e.position[0], "y": e.position[1], "radius": e.radius}
                for e in self.entities
            ],
            "waypoints": [list(w) for w in self.waypoints],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Environment":
        entities = [
            EntityState(int(e["id"]), EntityKind(e["kind"]), (e["x"], e["y"]), radius=float(e.get("radius", DEFAULT_RADIUS)))
            for e in d["entities"]
        ]
        return cls(
            width=float(d["width"]),
            height=float(d["height"]),
            entities=tuple(entities),
            waypoints=tuple(tuple(w) for w in d["waypoints"]),
            seed=int(d["seed"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Formation graphs and incidence matrices


@dataclass(frozen=True)
class FormationGraph:
    """Directed edges ``tail -> head`` with a desired ``tail - head`` displacement each.

    ``controllable_head`` records whether the head is an agent; it is checked
    against the entity list when the incidence matrix is built.
    """

    edges: tuple[tuple[int, int, bool], ...]
    desired_displacements: NDArray[np.float64] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        edges = tuple((int(t), int(h), bool(c)) for t, h, c in self.edges)
        object.__setattr__(self, "edges", edges)
        if self.desired_displacements is None:
            d = np.zeros((len(edges), 2))
        else:
            d = np.array(self.desired_displacements, dtype=np.float64).reshape(len(edges), 2)
        if not np.all(np.isfinite(d)):
            raise ValueError("desired displacements must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "desired_displacements", d)
        for t, h, _ in edges:
            if t == h:
                raise StructuralError(f"self-edge on entity {t}")

    def with_displacements(self, desired: NDArray[np.float64]) -> "FormationGraph":
        return FormationGraph(self.edges, desired)


@dataclass(frozen=True)
class IncidenceMatrix:
    B1: NDArray[np.float64]
    B2: NDArray[np.float64]
    agent_ids: tuple[int, ...]
    other_ids: tuple[int, ...]

    @property
    def B(self) -> NDArray[np.float64]:
        return np.hstack([self.B1, self.B2])


def _validate_graph(graph: FormationGraph, entities: Sequence[EntityState]) -> dict[int, EntityState]:
    if not graph.edges:
        raise StructuralError("formation graph has no edges")
    by_id = {e.id: e for e in entities}
    for t, h, ctrl in graph.edges:
        for end in (t, h):
            if end not in by_id:
                raise StructuralError(f"edge ({t}->{h}) references unknown entity id {end}")
        if not by_id[t].controllable:
            raise StructuralError(f"edge ({t}->{h}) tail must be an agent")
        if by_id[h].controllable != ctrl:
            raise StructuralError(f"edge ({t}->{h}) controllable_head flag disagrees with entity kind")
    return by_id


def check_determined(graph: FormationGraph, entities: Sequence[EntityState]) -> None:
    """Raise unless there are at least as many edges as agents (needed before solving for inputs)."""
    n_agents = sum(e.controllable for e in entities)
    if len(graph.edges) < n_agents:
        raise StructuralError(f"{len(graph.edges)} edges cannot determine {n_agents} agent inputs")


def build_incidence(graph: FormationGraph, entities: Sequence[EntityState]) -> IncidenceMatrix:
    _validate_graph(graph, entities)
    ordered = canonical_order(entities)
    agents = [e.id for e in ordered if e.controllable]
    others = [e.id for e in ordered if not e.controllable]
    col_a = {eid: k for k, eid in enumerate(agents)}
    col_o = {eid: k for k, eid in enumerate(others)}
    B1 = np.zeros((len(graph.edges), len(agents)))
    B2 = np.zeros((len(graph.edges), len(others)))
    for row, (t, h, _) in enumerate(graph.edges):
        B1[row, col_a[t]] = 1.0
        if h in col_a:
            B1[row, col_a[h]] = -1.0
        else:
            B2[row, col_o[h]] = -1.0
    return IncidenceMatrix(B1, B2, tuple(agents), tuple(others))


def stacked_positions(entities: Sequence[EntityState]) -> NDArray[np.float64]:
    """Positions in canonical order as an ``(n, 2)`` array."""
    return np.array([e.position for e in canonical_order(entities)], dtype=np.float64).reshape(-1, 2)


def displacement_errors(graph: FormationGraph, entities: Sequence[EntityState]) -> NDArray[np.float64]:
    """Per-edge ``(tail - head) - desired`` in graph edge order, shape ``(E, 2)``."""
    inc = build_incidence(graph, entities)
    return inc.B @ stacked_positions(entities) - graph.desired_displacements


def default_graph(agent_ids: Sequence[int], payload_id: int) -> FormationGraph:
    """Complete graph over agents plus one edge from every agent to the payload."""
    agent_ids = sorted(agent_ids)
    edges = [(i, j, True) for i, j in itertools.combinations(agent_ids, 2)]
    edges += [(i, payload_id, False) for i in agent_ids]
    return FormationGraph(tuple(edges))


# ---------------------------------------------------------------------------
# Environment generation


@dataclass(frozen=True)
class EnvSpec:
    """Entity counts for ``generate_environment``; ranges are inclusive."""

    n_agents: int = 4
    obstacles: tuple[int, int] = (2, 4)
    threats: tuple[int, int] = (2, 3)
    n_waypoints: int = 5
    width: float = 3.2
    height: float = 2.0
    radius: float = DEFAULT_RADIUS
    waypoint_separation: float = 0.5
    # keeps box corners (|offset| ~ 0.42 m) inside the arena
    waypoint_inset: float = 0.45
    route_clearance: float = 0.3
    entity_gap: float = 0.1
    max_tries: int = 2000

    def __post_init__(self) -> None:
        for name in ("obstacles", "threats"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi")
        if self.n_agents < 0 or self.n_waypoints < 1:
            raise ValueError("n_agents >= 0 and n_waypoints >= 1 required")


def _segment_distance(p: NDArray, a: NDArray, b: NDArray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    s = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + s * ab)))


def generate_environment(seed: int, spec: EnvSpec = EnvSpec()) -> Environment:
    """Randomly place waypoints, payload, agents, threats and obstacles.

    The payload starts on the first waypoint with the agents jittered around
    the box corners. Threats and obstacles keep ``route_clearance`` from the
    closed waypoint loop. Output is a pure function of ``(seed, spec)``.
    """
    rng = np.random.default_rng(seed)
    inset = spec.waypoint_inset

    waypoints: list[NDArray] = []
    for _ in range(spec.n_waypoints):
        for _ in range(spec.max_tries):
            w = rng.uniform([inset, inset], [spec.width - inset, spec.height - inset])
            if all(np.linalg.norm(w - q) >= spec.waypoint_separation for q in waypoints):
                waypoints.append(w)
                break
        else:
            raise EnvironmentGenerationError(
                f"waypoint separation >= {spec.waypoint_separation} m could not be met"
            )

    r = spec.radius
    placed: list[tuple[NDArray, float]] = []
    entities: list[EntityState] = []
    next_id = 0

    def add(kind: EntityKind, pos: NDArray) -> None:
        nonlocal next_id
        entities.append(EntityState(next_id, kind, (float(pos[0]), float(pos[1])), radius=r))
        placed.append((pos, r))
        next_id += 1

    corners = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float) * BOX_HALF_SIDE
    payload = waypoints[0]
    for k in range(spec.n_agents):
        offset = corners[k % 4] * (1 + k // 4) + rng.uniform(-0.05, 0.05, size=2)
        pos = np.clip(payload + offset, r, [spec.width - r, spec.height - r])
        add(EntityKind.AGENT, pos)
    add(EntityKind.PAYLOAD, payload)

    loop = list(zip(waypoints, waypoints[1:] + waypoints[:1]))
    for kind, (lo, hi) in ((EntityKind.THREAT, spec.threats), (EntityKind.OBSTACLE, spec.obstacles)):
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            for _ in range(spec.max_tries):
                pos = rng.uniform([r + 0.1, r + 0.1], [spec.width - r - 0.1, spec.height - r - 0.1])
                if any(np.linalg.norm(pos - q) < r + rq + spec.entity_gap for q, rq in placed):
                    continue
                if any(_segment_distance(pos, a, b) < spec.route_clearance for a, b in loop):
                    continue
                add(kind, pos)
                break
            else:
                raise EnvironmentGenerationError(
                    f"{kind.value} placement: separation >= sum of radii + {spec.entity_gap} m "
                    f"and route clearance >= {spec.route_clearance} m could not be met"
                )

    for (p, rp), (q, rq) in itertools.combinations(placed, 2):
        if np.linalg.norm(p - q) < rp + rq:
            raise EnvironmentGenerationError("initial entity overlap")

    return Environment(
        width=spec.width,
        height=spec.height,
        entities=tuple(entities),
        waypoints=tuple((float(w[0]), float(w[1])) for w in waypoints),
        seed=int(seed),
    )
