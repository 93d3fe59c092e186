"""Command line front end: reproducible experiment runs writing CSV files.

Exit codes: 0 success, 2 configuration error, 3 infeasibility,
4 solver failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import sim, verify
from .config import ConfigError, load_config
from .runtime import InfeasiblePrimaryError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_SOLVER = 4


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sltmpc",
                                description="Tube-MPC simulation and analysis runs")
    p.add_argument("subcommand", choices=["simulate", "roa", "bench", "tubes", "verify"])
    p.add_argument("--config", required=True, help="path to the experiment config file")
    p.add_argument("--out", default=".", help="output directory for CSV files")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--schedule", default=None,
                   help="override the secondary schedule: integer period or 'background'")
    p.add_argument("--repeats", type=int, default=100, help="benchmark solve count")
    return p


def _cmd_simulate(setup: sim.ExperimentSetup, out: Path, seed, schedule) -> int:
    try:
        log = sim.simulate(setup, seed=seed, schedule_override=schedule)
    except InfeasiblePrimaryError as exc:
        partial = getattr(exc, "partial_log", None)
        if partial is not None and partial.records:
            partial.cfg_hash = setup.cfg_hash
            sim.write_trajectory_csv(partial, out / "trajectory.csv")
        print(f"infeasible: {exc} (partial log flushed)", file=sys.stderr)
        return EXIT_INFEASIBLE
    sim.write_trajectory_csv(log, out / "trajectory.csv")
    if log.tube_snapshots:
        groups = {k: sim.tube_polygons(setup.data.X.H, t_x)
                  for k, (t_x, _t_u) in sorted(log.tube_snapshots.items())}
        sim.write_tubes_csv(groups, out / "tubes.csv", cfg_hash=setup.cfg_hash)
    print(f"simulate: {len(log.records)} steps written to {out / 'trajectory.csv'}")
    return EXIT_OK


def _cmd_roa(setup: sim.ExperimentSetup, out: Path) -> int:
    grid = sim.roa_grid(setup)
    sim.write_roa_csv(grid, out / "roa.csv")
    counts = {v: s.count("feasible") for v, s in grid.statuses.items()}
    print(f"roa: {grid.points.shape[0]} cells, feasible counts {counts}")
    if any("solver-failure" in s for s in grid.statuses.values()):
        return EXIT_SOLVER
    return EXIT_OK


def _cmd_bench(setup: sim.ExperimentSetup, out: Path, repeats: int) -> int:
    bench = sim.bench_solve_times(setup, n_repeats=repeats)
    sim.write_bench_csv(bench, out / "bench.csv")
    for v, s in bench.summary.items():
        print(f"bench: {v}: mean {s['mean_ms']:.3f} ms, median {s['median_ms']:.3f} ms, "
              f"p95 {s['p95_ms']:.3f} ms")
    print(f"bench: primary/full mean ratio {bench.ratios['primary_over_full']:.3f}")
    return EXIT_OK


def _cmd_tubes(setup: sim.ExperimentSetup, out: Path) -> int:
    x0 = np.asarray(setup.cfg.x0, dtype=float)
    memory = setup.initial_memory(x0)
    groups = {j: sim.tube_polygons(setup.data.X.H, e.tubes.t_x)
              for j, e in enumerate(memory.entries)}
    sim.write_tubes_csv(groups, out / "tubes.csv", cfg_hash=setup.cfg_hash)
    print(f"tubes: {len(groups)} memory entries written to {out / 'tubes.csv'}")
    return EXIT_OK


def _cmd_verify(setup: sim.ExperimentSetup) -> int:
    results = verify.run_all(setup)
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += 0 if ok else 1
    print(f"verify: {len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_SOLVER


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        import dataclasses
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.schedule is not None and args.schedule != "background":
        try:
            int(args.schedule)
        except ValueError:
            print("config error: --schedule takes an integer period or 'background'",
                  file=sys.stderr)
            return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        setup = sim.ExperimentSetup.from_config(cfg)
        if args.subcommand == "simulate":
            return _cmd_simulate(setup, out, args.seed, args.schedule)
        if args.subcommand == "roa":
            return _cmd_roa(setup, out)
        if args.subcommand == "bench":
            return _cmd_bench(setup, out, args.repeats)
        if args.subcommand == "tubes":
            return _cmd_tubes(setup, out)
        return _cmd_verify(setup)
    except InfeasiblePrimaryError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"solver/runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
