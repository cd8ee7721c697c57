"""Relative-cost tables and the benchmark sweep."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import EntityKind, EnvSpec, Environment, generate_environment
from .costs import TrueCost
from .sim import Method, SimConfig, TrialLog, run_trial

METHOD_ORDER = (Method.FP_AW, Method.FP, Method.FS, Method.AF)
THREADS_ENV = "FORMATION_FORGE_THREADS"


def _totals(trial: TrialLog | Mapping[str, Any]) -> tuple[dict[str, float], int, int, bool]:
    if isinstance(trial, TrialLog):
        return trial.final_costs(), trial.n_records, trial.n_threats, trial.aborted
    return dict(trial["final_costs"]), int(trial["steps"]), int(trial["n_threats"]), bool(trial["aborted"])


def accumulate_true_cost(
    trials: Sequence[TrialLog | Mapping[str, Any]],
    which: TrueCost,
    shift_protection: bool = True,
) -> float:
    """Per-trial sum of one true cost over all steps, averaged over the trials.

    Protection values lie in ``[-1, 1]`` per threat; with ``shift_protection``
    every step adds the threat count so a perfect block accumulates 0 and
    ratios between methods are meaningful. Aborted trials are skipped.
    """
    key = {TrueCost.PROTECTION: "protection", TrueCost.OBSTACLE: "obstacle", TrueCost.VIOLATION: "violation"}[which]
    sums = []
    for t in trials:
        totals, steps, n_threats, aborted = _totals(t)
        if aborted:
            continue
        s = totals[key]
        if which is TrueCost.PROTECTION and shift_protection:
            s += n_threats * steps
        sums.append(s)
    return float(np.mean(sums)) if sums else 0.0


def normalise_row(raw: Mapping[str, float]) -> dict[str, float]:
    """Divide by the row minimum; a non-positive minimum shifts the row so it becomes 1."""
    lo = min(raw.values())
    if lo > 0:
        return {k: v / lo for k, v in raw.items()}
    return {k: (v - lo + 1.0) for k, v in raw.items()}


@dataclass
class RelativeCostTable:
    methods: tuple[str, ...]
    # (row label, true-cost key) -> method -> value
    raw: dict[tuple[str, str], dict[str, float]]
    relative: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    totals: dict[str, float] = field(default_factory=dict)
    footnotes: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["environment,true_cost," + ",".join(self.methods)]
        for (env, cost), row in self.relative.items():
            lines.append(f"{env},{cost}," + ",".join(f"{row[m]:.6f}" for m in self.methods))
        lines.append("total,," + ",".join(f"{self.totals[m]:.6f}" for m in self.methods))
        return "\n".join(lines) + "\n"

    def to_text(self, title: str = "") -> str:
        width = max(8, *(len(m) + 2 for m in self.methods))
        head = f"{'':<10}{'cost':<6}" + "".join(f"{m:>{width}}" for m in self.methods)
        out = [title] if title else []
        out += [head, "-" * len(head)]
        for (env, cost), row in self.relative.items():
            out.append(f"{env:<10}{cost:<6}" + "".join(f"{row[m]:>{width}.2f}" for m in self.methods))
        out.append("-" * len(head))
        best = min(self.totals, key=self.totals.get)
        cells = "".join(
            f"{(('*' if m == best else '') + format(self.totals[m], '.2f')):>{width}}" for m in self.methods
        )
        out.append(f"{'Total Sum':<16}" + cells)
        out += [f"note: {n}" for n in self.footnotes]
        return "\n".join(out) + "\n"


def relative_table(
    accumulated: Mapping[tuple[str, str], Mapping[str, float]],
    methods: Sequence[str] | None = None,
) -> RelativeCostTable:
    """Normalise each (environment, true cost) row by its minimum; totals are column sums."""
    if methods is None:
        methods = tuple(next(iter(accumulated.values())).keys())
    raw = {key: {m: float(row[m]) for m in methods} for key, row in accumulated.items()}
    rel = {key: normalise_row(row) for key, row in raw.items()}
    totals = {m: float(sum(r[m] for r in rel.values())) for m in methods}
    return RelativeCostTable(tuple(methods), raw, rel, totals)


# ---------------------------------------------------------------------------
# benchmark sweep


@dataclass(frozen=True)
class BenchConfig:
    env_seeds: tuple[int, ...] = (0, 1, 2, 3)
    trials: int = 5
    methods: tuple[Method, ...] = METHOD_ORDER
    true_costs: tuple[TrueCost, ...] = (TrueCost.PROTECTION, TrueCost.OBSTACLE, TrueCost.VIOLATION)
    sim: SimConfig = SimConfig()
    env: EnvSpec = EnvSpec()
    detail_logs: bool = False

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BenchConfig":
        d = dict(d)
        kw: dict[str, Any] = {}
        if "env_seeds" in d:
            kw["env_seeds"] = tuple(int(s) for s in d.pop("env_seeds"))
        elif "n_envs" in d:
            base = int(d.pop("base_seed", 0))
            kw["env_seeds"] = tuple(range(base, base + int(d.pop("n_envs"))))
        if "trials" in d:
            kw["trials"] = int(d.pop("trials"))
        if "methods" in d:
            kw["methods"] = tuple(Method(m) for m in d.pop("methods"))
        if "true_costs" in d:
            kw["true_costs"] = tuple(TrueCost(c) for c in d.pop("true_costs"))
        if "sim" in d:
            kw["sim"] = SimConfig.from_dict(d.pop("sim"))
        if "env" in d:
            env = dict(d.pop("env"))
            for k in ("obstacles", "threats"):
                if k in env:
                    env[k] = tuple(env[k])
            kw["env"] = EnvSpec(**env)
        if "detail_logs" in d:
            kw["detail_logs"] = bool(d.pop("detail_logs"))
        if d:
            raise ValueError(f"unknown bench config keys: {sorted(d)}")
        return cls(**kw)


@dataclass(frozen=True)
class TrialTask:
    env: Environment
    config: SimConfig
    trial_index: int
    out_dir: str | None
    detail_logs: bool


def tasks_for(config: BenchConfig, envs: Sequence[Environment], out_dir: str | None = None) -> list[TrialTask]:
    """Deterministic (environment, trial, method) task order.

    FP-AW runs once per observed true cost; the other methods never look at
    the true cost, so one run serves every row.
    """
    tasks = []
    for env in envs:
        for k in range(config.trials):
            for m in config.methods:
                costs = config.true_costs if m is Method.FP_AW else (config.true_costs[0],)
                for c in costs:
                    cfg = replace(config.sim, method=m, true_cost=c)
                    tasks.append(TrialTask(env, cfg, k, out_dir, config.detail_logs))
    return tasks


def write_trial(log: TrialLog, directory: Path, detail: bool = False) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "steps.csv").write_text(log.steps_csv())
    (directory / "weights.csv").write_text(log.weights_csv())
    if detail:
        (directory / "plan.csv").write_text(log.plan_csv())
        (directory / "commands.csv").write_text(log.commands_csv())
    (directory / "meta.json").write_text(json.dumps(log.sidecar(), indent=2, sort_keys=True) + "\n")


def execute(task: TrialTask) -> dict[str, Any]:
    log = run_trial(task.env, task.config, task.trial_index)
    if task.out_dir is not None:
        write_trial(log, Path(task.out_dir) / "logs" / log.name, task.detail_logs)
    return log.sidecar()


def thread_count(default: int = 1) -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return default
    return max(1, int(raw))


def run_tasks(tasks: Sequence[TrialTask], threads: int | None = None) -> list[dict[str, Any]]:
    threads = thread_count() if threads is None else threads
    if threads <= 1:
        return [execute(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        # map preserves task order, so merging is independent of scheduling
        return list(pool.map(execute, tasks))


@dataclass
class BenchResult:
    protection: RelativeCostTable
    multi: RelativeCostTable
    sidecars: list[dict[str, Any]]
    aborted: int


def tables_from_sidecars(
    sidecars: Iterable[Mapping[str, Any]],
    true_costs: Sequence[TrueCost] = tuple(TrueCost),
    methods: Sequence[Method] = METHOD_ORDER,
) -> tuple[RelativeCostTable, RelativeCostTable, int]:
    """Build the protection-only and multi-cost tables from trial sidecars."""
    sidecars = list(sidecars)
    env_seeds = sorted({int(s["env_seed"]) for s in sidecars})
    aborted = sum(bool(s["aborted"]) for s in sidecars)
    rows: dict[tuple[str, str], dict[str, float]] = {}
    for k, seed in enumerate(env_seeds, start=1):
        for cost in true_costs:
            row = {}
            for m in methods:
                group = [
                    s for s in sidecars
                    if int(s["env_seed"]) == seed and s["method"] == m.value
                    and (m is not Method.FP_AW or s["true_cost"] == cost.value)
                ]
                if group:
                    row[m.value] = accumulate_true_cost(group, cost)
            rows[(f"Env {k}", cost.value)] = row
    names = [m.value for m in methods if all(m.value in r for r in rows.values())]
    multi = relative_table(rows, names)
    prot = relative_table({k: v for k, v in rows.items() if k[1] == TrueCost.PROTECTION.value}, names)
    notes = [f"environment seeds {env_seeds}"]
    if aborted:
        notes.append(f"{aborted} aborted trial(s) excluded")
    multi.footnotes = prot.footnotes = notes
    return prot, multi, aborted


def benchmark(config: BenchConfig = BenchConfig(), out_dir: str | Path | None = None,
              threads: int | None = None) -> BenchResult:
    envs = [generate_environment(seed, config.env) for seed in config.env_seeds]
    out = None
    if out_dir is not None:
        out_path = Path(out_dir)
        (out_path / "envs").mkdir(parents=True, exist_ok=True)
        for env in envs:
            (out_path / "envs" / f"env{env.seed}.json").write_text(env.to_json() + "\n")
        out = str(out_path)
    sidecars = run_tasks(tasks_for(config, envs, out), threads)
    costs = config.true_costs if TrueCost.PROTECTION in config.true_costs else (TrueCost.PROTECTION, *config.true_costs)
    prot, multi, aborted = tables_from_sidecars(sidecars, costs, config.methods)
    result = BenchResult(prot, multi, sidecars, aborted)
    if out is not None:
        write_tables(result, Path(out))
    return result


def write_tables(result: BenchResult, out: Path) -> None:
    (out / "table_protection.csv").write_text(result.protection.to_csv())
    (out / "table_protection.txt").write_text(result.protection.to_text("Relative protection cost"))
    (out / "table_multi.csv").write_text(result.multi.to_csv())
    (out / "table_multi.txt").write_text(result.multi.to_text("Relative cost (P / O / V)"))


def load_sidecars(logs_dir: str | Path) -> list[dict[str, Any]]:
    paths = sorted(Path(logs_dir).rglob("meta.json"))
    return [json.loads(p.read_text()) for p in paths]


# ---------------------------------------------------------------------------
# trajectory SVG


def trajectory_svg(env: Environment, agents: np.ndarray, leader: np.ndarray, scale: float = 200.0) -> str:
    """Agent traces (blue) and leader trace (green) over the arena entities."""
    W, H = env.width * scale, env.height * scale

    def pt(x: float, y: float) -> str:
        return f"{x * scale:.1f},{H - y * scale:.1f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" viewBox="0 0 {W:.0f} {H:.0f}">',
        f'<rect width="{W:.0f}" height="{H:.0f}" fill="white" stroke="black"/>',
    ]
    for w in env.waypoints:
        parts.append(f'<rect x="{w[0] * scale - 5:.1f}" y="{H - w[1] * scale - 5:.1f}" width="10" height="10" fill="black"/>')
    colour = {EntityKind.THREAT: "red", EntityKind.OBSTACLE: "gray"}
    for e in env.entities:
        if e.kind in colour:
            x, y = pt(*e.position).split(",")
            parts.append(f'<circle cx="{x}" cy="{y}" r="{e.radius * scale:.1f}" fill="{colour[e.kind]}"/>')
    for i in range(agents.shape[1]):
        path = " ".join(pt(*p) for p in agents[:, i, :])
        parts.append(f'<polyline points="{path}" fill="none" stroke="blue" stroke-width="1"/>')
    path = " ".join(pt(*p) for p in leader)
    parts.append(f'<polyline points="{path}" fill="none" stroke="green" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
