"""Deterministic discrete-time simulation of one formation trial.

Per step: leader velocity, method-specific targets (planner or shape
template), displacement control, optional safety filter, Euler integration,
and a full record of costs, weights and commands.
"""

from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .controller import (
    DisplacementController,
    ShapeTemplate,
    af_targets,
    displacements_from_targets,
    fs_targets,
    safety_filter,
)
from .core import EntityKind, Environment, default_graph
from .costs import CostThresholds, TrueCost, World, assign_threats, basis_vector, true_costs
from .planner import AdamHyper, PlannerState, arena_box, plan_formation
from .surrogate import AdaptiveConfig, AdaptiveState, SurrogateModel, adaptive_step, validation_update


class Method(enum.Enum):
    FP_AW = "FP-AW"
    FP = "FP"
    FS = "FS"
    AF = "AF"

    @property
    def plans(self) -> bool:
        return self in (Method.FP_AW, Method.FP)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1.0 / 30.0
    total_steps: int = 3000
    method: Method = Method.FP_AW
    v_max: float = 0.2
    # the escorted leader must be slower than its escorts to be catchable
    leader_speed: float = 0.1
    leader_gain: float = 1.0
    waypoint_tolerance: float = 0.05
    seed: int = 0
    true_cost: TrueCost = TrueCost.PROTECTION
    plan_every: int = 1
    # protection-basis neighbourhoods: "assigned" (one agent per threat) or "all"
    protection_neighbours: str = "assigned"
    filter_planners: bool = False
    filter_threats: bool = True
    safety_margin: float | None = None
    thresholds: CostThresholds = CostThresholds()
    adaptive: AdaptiveConfig = AdaptiveConfig()
    adam: AdamHyper = AdamHyper()

    def __post_init__(self) -> None:
        if self.dt <= 0 or self.total_steps <= 0:
            raise ValueError("dt and total_steps must be positive")
        if self.plan_every < 1:
            raise ValueError("plan_every must be >= 1")
        if self.protection_neighbours not in ("assigned", "all"):
            raise ValueError("protection_neighbours must be 'assigned' or 'all'")

    @property
    def margin(self) -> float:
        return self.thresholds.tau_o + 0.05 if self.safety_margin is None else self.safety_margin

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["method"] = self.method.value
        d["true_cost"] = self.true_cost.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimConfig":
        d = dict(d)
        nested = {"thresholds": CostThresholds, "adaptive": AdaptiveConfig, "adam": AdamHyper}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if "method" in d:
            d["method"] = Method(d["method"])
        if "true_cost" in d:
            d["true_cost"] = TrueCost(d["true_cost"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SimConfig keys: {sorted(unknown)}")
        return cls(**d)


def leader_step(
    leader: ArrayLike,
    waypoints: NDArray,
    active_index: int,
    gain: float,
    tol: float,
    v_max: float,
) -> tuple[NDArray, int]:
    """Proportional velocity toward the active waypoint; advance (and wrap) once within ``tol``."""
    leader = np.asarray(leader, dtype=float)
    if np.linalg.norm(waypoints[active_index] - leader) <= tol:
        active_index = (active_index + 1) % len(waypoints)
    v = gain * (waypoints[active_index] - leader)
    speed = float(np.linalg.norm(v))
    if speed > v_max:
        v *= v_max / speed
    return v, active_index


@dataclass
class TrialLog:
    """Per-step arrays; row ``k`` describes the state at the start of step ``k``."""

    env_seed: int
    method: Method
    trial_index: int
    true_cost: TrueCost
    n_agents: int
    n_threats: int
    total_steps: int
    dt: float
    agents: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    leader: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    commands: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    saturated: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    filtered: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    plan: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    plan_value: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    alpha: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    costs: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    surrogate: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    lyapunov: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    w: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    tau_x: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    admitted: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    adopted: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    residual: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    waypoint_index: NDArray = field(repr=False, default=None)  # type: ignore[assignment]
    n_records: int = 0
    aborted: bool = False
    abort_reason: str = ""

    def __post_init__(self) -> None:
        T, n = self.total_steps, self.n_agents
        if self.agents is None:
            self.agents = np.zeros((T, n, 2))
            self.leader = np.zeros((T, 2))
            self.commands = np.zeros((T, n, 2))
            self.saturated = np.zeros((T, n), dtype=bool)
            self.filtered = np.zeros((T, n), dtype=bool)
            self.plan = np.zeros((T, n, 2))
            self.plan_value = np.zeros(T)
            self.alpha = np.zeros((T, 5))
            self.costs = np.zeros((T, 3))
            self.surrogate = np.zeros(T)
            self.lyapunov = np.zeros(T)
            self.w = np.zeros(T)
            self.tau_x = np.zeros(T)
            self.admitted = np.zeros(T, dtype=bool)
            self.adopted = np.zeros(T, dtype=bool)
            self.residual = np.full(T, np.nan)
            self.waypoint_index = np.zeros(T, dtype=int)

    @property
    def name(self) -> str:
        tag = f"_{self.true_cost.value}" if self.method is Method.FP_AW else ""
        return f"env{self.env_seed}_{self.method.value}{tag}_trial{self.trial_index}"

    def cost_series(self, which: TrueCost) -> NDArray:
        col = {TrueCost.PROTECTION: 0, TrueCost.OBSTACLE: 1, TrueCost.VIOLATION: 2}[which]
        return self.costs[: self.n_records, col]

    def final_costs(self) -> dict[str, float]:
        return {
            "protection": float(self.cost_series(TrueCost.PROTECTION).sum()),
            "obstacle": float(self.cost_series(TrueCost.OBSTACLE).sum()),
            "violation": float(self.cost_series(TrueCost.VIOLATION).sum()),
        }

    def sidecar(self) -> dict[str, Any]:
        return {
            "env_seed": self.env_seed,
            "method": self.method.value,
            "trial_index": self.trial_index,
            "true_cost": self.true_cost.value,
            "n_threats": self.n_threats,
            "steps": self.n_records,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "final_costs": self.final_costs(),
        }

    # -- CSV writers -------------------------------------------------------

    def steps_csv(self) -> str:
        n = self.n_agents
        head = ["step", "t", "leader_x", "leader_y"]
        head += [f"{c}{i}" for i in range(n) for c in ("x", "y")]
        head += ["protection", "obstacle", "violation", "surrogate", "plan_surrogate", "lyapunov"]
        head += [f"alpha_{k}" for k in range(1, 6)]
        buf = io.StringIO()
        buf.write(",".join(head) + "\n")
        for k in range(self.n_records):
            row = [str(k), _f(k * self.dt), _f(self.leader[k, 0]), _f(self.leader[k, 1])]
            row += [_f(v) for v in self.agents[k].reshape(-1)]
            row += [_f(v) for v in self.costs[k]]
            row += [_f(self.surrogate[k]), _f(self.plan_value[k]), _f(self.lyapunov[k])]
            row += [_f(v) for v in self.alpha[k]]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def weights_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step," + ",".join(f"alpha_{k}" for k in range(1, 6)) + ",w_t,tau_x,accepted,fit_residual\n")
        for k in range(self.n_records):
            res = "" if math.isnan(self.residual[k]) else _f(self.residual[k])
            row = [str(k)] + [_f(v) for v in self.alpha[k]] + [_f(self.w[k]), _f(self.tau_x[k])]
            row += [str(bool(self.admitted[k])).lower(), res]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def plan_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,agent_id,x_plan,y_plan,surrogate_value\n")
        for k in range(self.n_records):
            for i in range(self.n_agents):
                buf.write(f"{k},{i},{_f(self.plan[k, i, 0])},{_f(self.plan[k, i, 1])},{_f(self.plan_value[k])}\n")
        return buf.getvalue()

    def commands_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,agent_id,ux,uy,saturated,filtered\n")
        for k in range(self.n_records):
            for i in range(self.n_agents):
                buf.write(
                    f"{k},{i},{_f(self.commands[k, i, 0])},{_f(self.commands[k, i, 1])},"
                    f"{str(bool(self.saturated[k, i])).lower()},{str(bool(self.filtered[k, i])).lower()}\n"
                )
        return buf.getvalue()


def _f(x: float) -> str:
    return format(float(x), ".10g")


def trial_rng(env_seed: int, config: SimConfig, trial_index: int) -> np.random.Generator:
    method_key = list(Method).index(config.method)
    cost_key = list(TrueCost).index(config.true_cost)
    return np.random.default_rng([config.seed, env_seed, trial_index, method_key, cost_key])


@dataclass
class MethodState:
    """Everything that evolves during a trial besides entity positions."""

    waypoint_index: int
    heading: float
    alpha: NDArray
    planner: PlannerState | None = None
    model: SurrogateModel | None = None
    adaptive: AdaptiveState | None = None
    prev_c_star: float | None = None
    prev_plan_value: float | None = None
    prev_prev_plan_value: float | None = None
    rng: np.random.Generator | None = None


@dataclass(frozen=True)
class StepRecord:
    agents: NDArray
    leader: NDArray
    commands: NDArray
    saturated: NDArray
    filtered: NDArray
    plan: NDArray
    plan_value: float
    alpha: NDArray
    costs: tuple[float, float, float]
    surrogate: float
    lyapunov: float
    w: float
    tau_x: float
    admitted: bool
    adopted: bool
    residual: float
    waypoint_index: int


class Simulation:
    """One trial: fixed environment, method and config."""

    def __init__(self, env: Environment, config: SimConfig, trial_index: int = 0):
        self.env = env
        self.config = config
        self.trial_index = trial_index
        agents = env.agents
        payload = env.payload
        self.n_agents = len(agents)
        self.graph = default_graph([a.id for a in agents], payload.id)
        self.controller = DisplacementController(self.graph, env.entities, config.v_max)
        self.agent_ids = [a.id for a in agents]
        self.payload_id = payload.id
        self.threats = env.positions(EntityKind.THREAT)
        self.obstacles = env.positions(EntityKind.OBSTACLE)
        self.waypoints = np.array(env.waypoints, dtype=float)
        radius = max((a.radius for a in agents), default=0.0)
        self.bounds = arena_box(env.width, env.height, radius)
        self.template = ShapeTemplate.box(self.n_agents)
        self.hazards = np.vstack([self.obstacles, self.threats]) if config.filter_threats else self.obstacles
        self.world = World.from_environment(env)
        # nodes in canonical order: agents, payload, threats, obstacles
        self._static_nodes = np.vstack([self.threats, self.obstacles])
        self._s_dot = np.zeros((1 + len(self._static_nodes), 2))

    def initial_state(self) -> MethodState:
        cfg = self.config
        rng = trial_rng(self.env.seed, cfg, self.trial_index)
        alpha = np.full(5, 0.2)
        if cfg.method is Method.FP:
            alpha = np.maximum(rng.dirichlet(np.ones(5)), cfg.adaptive.alpha_min)
            alpha /= alpha.sum()
        first = self.waypoints[0] - self.world.payload
        heading = math.atan2(first[1], first[0]) if np.linalg.norm(first) > 1e-9 else 0.0
        state = MethodState(waypoint_index=0, heading=heading, alpha=alpha, rng=rng)
        if cfg.method.plans:
            state.planner = PlannerState(self.world.agents.copy(), cfg.adam)
        if cfg.method is Method.FP_AW:
            state.model = SurrogateModel.empty()
            state.adaptive = AdaptiveState.initial(cfg.adaptive)
        return state

    def _nodes(self, world: World) -> NDArray:
        return np.vstack([world.agents, world.payload[None, :], self._static_nodes])

    def step(self, world: World, state: MethodState, k: int) -> tuple[World, StepRecord]:
        cfg = self.config
        thr = cfg.thresholds
        if cfg.protection_neighbours == "assigned":
            world = world.with_mask(assign_threats(world.agents, world.threats, world.payload))
        costs = true_costs(world, thr)
        c_star = costs[cfg.true_cost]
        f = basis_vector(world, thr)

        admitted = adopted = False
        residual = math.nan
        if cfg.method is Method.FP_AW:
            if state.prev_c_star is not None and state.prev_plan_value is not None:
                state.adaptive = validation_update(
                    state.adaptive, c_star, state.prev_c_star,
                    state.prev_plan_value, state.prev_prev_plan_value, state.rng,
                )
            state.adaptive, state.model, outcome = adaptive_step(
                state.adaptive, state.model, f, world.agents, c_star, timestamp=k
            )
            admitted, adopted, residual = outcome.admitted, outcome.adopted, outcome.residual
            state.alpha = state.model.alpha
        surrogate = float(state.alpha @ f)

        # (1) leader
        v_lead, state.waypoint_index = leader_step(
            world.payload, self.waypoints, state.waypoint_index,
            cfg.leader_gain, cfg.waypoint_tolerance, cfg.leader_speed,
        )
        # (2) targets
        plan_value = surrogate
        if cfg.method.plans:
            if k % cfg.plan_every == 0:
                state.planner, result = plan_formation(state.planner, state.alpha, world, self.bounds, thr)
                plan_value = result.surrogate_value
            else:
                plan_value = float(state.alpha @ basis_vector(world.with_agents(state.planner.planned_positions), thr))
            targets = state.planner.planned_positions
            if cfg.method is Method.FP_AW:
                state.prev_prev_plan_value = surrogate if state.prev_plan_value is None else state.prev_plan_value
                state.prev_plan_value = plan_value
                state.prev_c_star = c_star
        elif cfg.method is Method.FS:
            targets = fs_targets(world.payload, self.template)
        else:
            speed = float(np.linalg.norm(v_lead))
            if speed > 1e-6:
                state.heading = math.atan2(v_lead[1], v_lead[0])
            targets = af_targets(world.payload, state.heading, self.template)
        desired = self._desired(targets, world.payload)

        # (3) control
        self._s_dot[0] = v_lead
        nodes = self._nodes(world)
        u, sat, e = self.controller.command(nodes, desired, self._s_dot)
        lyap = 0.5 * float(np.sum(e * e))
        # (4) safety filter
        if cfg.method.plans and not cfg.filter_planners:
            filt = np.zeros(self.n_agents, dtype=bool)
        else:
            u, filt = safety_filter(u, world.agents, self.hazards, cfg.margin)
        # (5) integrate
        new_world = World(world.agents + u * cfg.dt, world.payload + v_lead * cfg.dt, world.threats, world.obstacles)

        adaptive = state.adaptive
        record = StepRecord(
            agents=world.agents, leader=world.payload, commands=u, saturated=sat, filtered=filt,
            plan=np.asarray(targets), plan_value=plan_value, alpha=np.asarray(state.alpha),
            costs=(costs[TrueCost.PROTECTION], costs[TrueCost.OBSTACLE], costs[TrueCost.VIOLATION]),
            surrogate=surrogate, lyapunov=lyap,
            w=adaptive.w if adaptive else math.nan, tau_x=adaptive.tau_x if adaptive else math.nan,
            admitted=admitted, adopted=adopted, residual=residual, waypoint_index=state.waypoint_index,
        )
        return new_world, record

    def _desired(self, targets: NDArray, payload: NDArray) -> NDArray:
        tmap = dict(zip(self.agent_ids, targets))
        return displacements_from_targets(self.graph, tmap, {self.payload_id: payload})

    def run(self) -> TrialLog:
        cfg = self.config
        log = TrialLog(
            env_seed=self.env.seed, method=cfg.method, trial_index=self.trial_index,
            true_cost=cfg.true_cost, n_agents=self.n_agents, n_threats=len(self.threats),
            total_steps=cfg.total_steps, dt=cfg.dt,
        )
        state = self.initial_state()
        world = self.world
        for k in range(cfg.total_steps):
            try:
                new_world, rec = self.step(world, state, k)
            except (FloatingPointError, np.linalg.LinAlgError) as exc:
                log.aborted, log.abort_reason = True, f"step {k}: {exc}"
                break
            if not (np.all(np.isfinite(new_world.agents)) and np.all(np.isfinite(rec.commands))
                    and all(math.isfinite(c) for c in rec.costs)):
                log.aborted, log.abort_reason = True, f"step {k}: non-finite state"
                break
            _store(log, k, rec)
            world = new_world
        return log


def _store(log: TrialLog, k: int, rec: StepRecord) -> None:
    log.agents[k] = rec.agents
    log.leader[k] = rec.leader
    log.commands[k] = rec.commands
    log.saturated[k] = rec.saturated
    log.filtered[k] = rec.filtered
    log.plan[k] = rec.plan
    log.plan_value[k] = rec.plan_value
    log.alpha[k] = rec.alpha
    log.costs[k] = rec.costs
    log.surrogate[k] = rec.surrogate
    log.lyapunov[k] = rec.lyapunov
    log.w[k] = rec.w
    log.tau_x[k] = rec.tau_x
    log.admitted[k] = rec.admitted
    log.adopted[k] = rec.adopted
    log.residual[k] = rec.residual
    log.waypoint_index[k] = rec.waypoint_index
    log.n_records = k + 1


def run_trial(env: Environment, config: SimConfig, trial_index: int = 0) -> TrialLog:
    return Simulation(env, config, trial_index).run()
