"""Command line entry point: ``formation-forge <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .core import EnvSpec, Environment, generate_environment
from .costs import TrueCost, World
from .evaluation import (
    BenchConfig,
    benchmark,
    load_sidecars,
    tables_from_sidecars,
    trajectory_svg,
    write_trial,
)
from .sim import Method, SimConfig, run_trial
from .surrogate import dependence_diagnostic


def _read_json(path: str | None) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def cmd_gen_env(args: argparse.Namespace) -> int:
    cfg = _read_json(args.config)
    spec = cfg.get("env", {})
    for k in ("obstacles", "threats"):
        if k in spec:
            spec[k] = tuple(spec[k])
    env = generate_environment(args.seed, EnvSpec(**spec))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(env.to_json() + "\n")
    print(f"wrote {args.out}: {len(env.entities)} entities, {len(env.waypoints)} waypoints")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    env = Environment.from_json(Path(args.env).read_text())
    cfg = _read_json(args.config)
    sim = SimConfig.from_dict(cfg.get("sim", cfg))
    overrides = {"method": Method(args.method)}
    if args.true_cost:
        overrides["true_cost"] = TrueCost(args.true_cost)
    sim = SimConfig.from_dict({**sim.to_dict(), **{k: v.value for k, v in overrides.items()}})
    log = run_trial(env, sim, args.trial)
    write_trial(log, Path(args.out), detail=args.detail)
    print(json.dumps(log.sidecar(), indent=2, sort_keys=True))
    return 1 if log.aborted else 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = BenchConfig.from_dict(_read_json(args.config))
    result = benchmark(config, args.out_dir, threads=args.threads)
    print(result.protection.to_text("Relative protection cost"))
    print(result.multi.to_text("Relative cost (P / O / V)"))
    return 0


def _load_steps(path: Path, n_agents: int) -> tuple[np.ndarray, np.ndarray]:
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    agents = np.array([[[float(r[f"x{i}"]), float(r[f"y{i}"])] for i in range(n_agents)] for r in rows])
    leader = np.array([[float(r["leader_x"]), float(r["leader_y"])] for r in rows])
    return agents, leader


def cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.logs)
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "svg":
        envs = {env.seed: env for env in (Environment.from_json(p.read_text()) for p in sorted(root.rglob("env*.json")))}
        written = 0
        for meta_path in sorted(root.rglob("meta.json")):
            meta = json.loads(meta_path.read_text())
            env = envs.get(int(meta["env_seed"]))
            if env is None:
                continue
            agents, leader = _load_steps(meta_path.parent / "steps.csv", len(env.agents))
            (out / f"{meta_path.parent.name}.svg").write_text(trajectory_svg(env, agents, leader))
            written += 1
        print(f"wrote {written} SVG file(s) to {out}")
        return 0
    prot, multi, _ = tables_from_sidecars(load_sidecars(root))
    if args.format == "csv":
        (out / "table_protection.csv").write_text(prot.to_csv())
        (out / "table_multi.csv").write_text(multi.to_csv())
        sys.stdout.write(multi.to_csv())
    else:
        text = prot.to_text("Relative protection cost") + "\n" + multi.to_text("Relative cost (P / O / V)")
        (out / "report.txt").write_text(text)
        sys.stdout.write(text)
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    """Smallest singular value of the basis-gradient matrix over random agent placements."""
    env = Environment.from_json(Path(args.env).read_text())
    world = World.from_environment(env)
    rng = np.random.default_rng(args.seed)
    start = dependence_diagnostic(world)
    sigmas = []
    r = max((a.radius for a in env.agents), default=0.0)
    for _ in range(args.samples):
        agents = rng.uniform([r, r], [env.width - r, env.height - r], size=world.agents.shape)
        sigmas.append(dependence_diagnostic(world.with_agents(agents)).sigma_min)
    sigmas = np.array(sigmas)
    report = {
        "env_seed": env.seed,
        "initial": {"sigma_min": start.sigma_min, "independent": start.independent, "status": start.status},
        "samples": args.samples,
        "sigma_min_quantiles": dict(zip(["min", "q25", "median", "q75", "max"],
                                        np.quantile(sigmas, [0, 0.25, 0.5, 0.75, 1]).round(8).tolist())),
        "fraction_independent": float(np.mean(sigmas > 1e-6)),
    }
    print(json.dumps(report, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="formation-forge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-env", help="generate a random environment as JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON with an 'env' section of EnvSpec overrides")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("run", help="run one trial")
    p.add_argument("--env", required=True)
    p.add_argument("--method", required=True, choices=[m.value for m in Method])
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--true-cost", choices=[c.value for c in TrueCost])
    p.add_argument("--config", help="JSON mirroring SimConfig (top level or under 'sim')")
    p.add_argument("--detail", action="store_true", help="also write plan.csv and commands.csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="full environment x method x trial sweep")
    p.add_argument("--config", help="JSON bench config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threads", type=int, help="worker processes (default: $FORMATION_FORGE_THREADS or 1)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="tables or SVG traces from a log directory")
    p.add_argument("--logs", required=True)
    p.add_argument("--format", choices=["csv", "txt", "svg"], default="txt")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("diagnose", help="basis-gradient independence sweep")
    p.add_argument("--env", required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
