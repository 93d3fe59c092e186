"""Closed-loop experiment drivers, feasibility grids, benchmarks, CSV output.

All output files start with a ``# config_hash=...`` comment line so every
figure can be traced back to the exact configuration that produced it.
Floats are printed with 17 significant digits (value-preserving for
doubles).
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

import numpy as np

from . import runtime
from .config import ExperimentConfig, config_hash, problem_data
from .model import ProblemData, TerminalIngredients, drs_tightenings, terminal_ingredients
from .ocp import (
    MemoryEntry,
    SolverSettings,
    build_fixed_tube,
    build_primary,
    build_sltmpc,
    solve,
    with_initial_state,
)
from .polytope import HPolytope, PolytopeError, contains, vertices_2d

VARIANTS = ("fixed_tube_baseline", "primary_async", "full_sltmpc")


@dataclass(frozen=True)
class StepRecord:
    k: int
    x: np.ndarray
    u: np.ndarray
    w: np.ndarray
    lam: np.ndarray
    objective: float
    solve_time: float
    mem_event: str


@dataclass
class TrajectoryLog:
    """Per-step records of one closed-loop run plus run metadata."""

    records: list[StepRecord]
    capacity: int
    tube_snapshots: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    seed: int | None = None
    cfg_hash: str | None = None

    def canonical_bytes(self) -> bytes:
        """Deterministic serialization for reproducibility comparisons.

        Wall-clock solve times are excluded: they are the one per-step
        quantity that legitimately differs between identical runs.
        """
        return _trajectory_csv_text(self, include_timing=False).encode("utf-8")


@dataclass
class RoaGrid:
    """Feasibility statuses per grid point and controller variant."""

    points: np.ndarray
    spacing: float
    statuses: dict[str, list[str]]
    cfg_hash: str | None = None


def box_bounds(P: HPolytope) -> tuple[np.ndarray, np.ndarray] | None:
    """Box bounds of an H-rep polytope if it is axis-aligned, else ``None``."""
    p = P.dim
    lo = np.full(p, -np.inf)
    hi = np.full(p, np.inf)
    for row, off in zip(P.H, P.h):
        nz = np.flatnonzero(row)
        if nz.size != 1:
            return None
        i = nz[0]
        if row[i] > 0:
            hi[i] = min(hi[i], off / row[i])
        else:
            lo[i] = max(lo[i], off / row[i])
    if np.any(~np.isfinite(lo)) or np.any(~np.isfinite(hi)):
        return None
    return lo, hi


def sample_disturbance(W: HPolytope, rng: np.random.Generator, mode: str = "uniform") -> np.ndarray:
    """Sample from a box disturbance set.

    ``mode='uniform'`` draws uniformly; ``mode='vertex'`` draws a random
    extreme point for adversarial stress runs. Non-box sets are not
    supported.
    """
    bounds = box_bounds(W)
    if bounds is None:
        raise ValueError("disturbance sampling supports axis-aligned box sets only")
    lo, hi = bounds
    if mode == "uniform":
        return rng.uniform(lo, hi)
    if mode == "vertex":
        pick = rng.integers(0, 2, size=lo.size)
        return np.where(pick == 1, hi, lo)
    raise ValueError(f"unknown sampling mode '{mode}'")


@dataclass
class ExperimentSetup:
    """Config-derived objects shared by all experiment drivers."""

    cfg: ExperimentConfig
    data: ProblemData
    terminal: TerminalIngredients
    drs_entry: MemoryEntry
    settings: SolverSettings
    cfg_hash: str
    _entry_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "ExperimentSetup":
        data = problem_data(cfg)
        terminal = terminal_ingredients(data, contraction=cfg.mrpi_contraction,
                                        eps=cfg.mrpi_eps, step_cap=cfg.mrpi_step_cap)
        settings = SolverSettings(tol=cfg.solver_tol, max_iter=cfg.solver_max_iter)
        drs = drs_tightenings(data, terminal)
        return cls(cfg=cfg, data=data, terminal=terminal, drs_entry=drs,
                   settings=settings, cfg_hash=config_hash(cfg))

    def schedule(self, override: str | None = None) -> runtime.Schedule:
        sched = override if override is not None else self.cfg.schedule
        if sched == "background":
            return runtime.Schedule(kind="background", period=None)
        return runtime.Schedule(kind="periodic", period=int(sched))

    def seed_entry(self, x_seed=None, cost_mode: str = "nominal",
                   birth_step: int = 0) -> MemoryEntry | None:
        x = np.asarray(self.cfg.seed_state if x_seed is None else x_seed, dtype=float)
        key = (cost_mode, birth_step, x.tobytes())
        if key not in self._entry_cache:
            # The tube optimizer is deterministic, so entries for repeated
            # snapshots (e.g. the shared start state of a run batch) are
            # computed once and shared; entries are immutable.
            self._entry_cache[key] = runtime.run_secondary(
                self.data, self.terminal, x, cost_mode=cost_mode,
                birth_step=birth_step, settings=self.settings,
                mu=self.cfg.tightening_mu)
        return self._entry_cache[key]

    def initial_memory(self, x0) -> runtime.Memory:
        """Startup memory for a closed-loop run: offline tubes plus one
        tightening-optimized entry at the initial state (skipped when the
        tube optimizer is infeasible there)."""
        entries = [self.drs_entry]
        extra = self.seed_entry(x_seed=x0, cost_mode="tightening")
        if extra is not None and len(entries) < self.cfg.memory_capacity:
            entries.append(extra)
        return runtime.Memory(capacity=self.cfg.memory_capacity, entries=entries)

    def controller_state(self, memory: runtime.Memory) -> runtime.ControllerState:
        return runtime.ControllerState(data=self.data, terminal=self.terminal,
                                       memory=memory, rho=self.cfg.rho,
                                       solver=self.settings,
                                       secondary_cost=self.cfg.secondary_cost,
                                       tightening_mu=self.cfg.tightening_mu)


def simulate(setup: ExperimentSetup, seed: int | None = None,
             schedule_override: str | None = None, steps: int | None = None,
             x0=None, disturbance_mode: str = "uniform") -> TrajectoryLog:
    """One seeded closed-loop run with the configured schedule."""
    cfg = setup.cfg
    seed = cfg.seed if seed is None else seed
    steps = cfg.steps if steps is None else steps
    x0 = np.asarray(cfg.x0 if x0 is None else x0, dtype=float)
    rng = np.random.default_rng(seed)
    state = setup.controller_state(setup.initial_memory(x0))
    dist = lambda r: sample_disturbance(setup.data.W, r, mode=disturbance_mode)
    log = runtime.run_closed_loop(state, x0, setup.schedule(schedule_override), steps, rng,
                                  disturbance=dist,
                                  snapshot_steps=tuple(cfg.tube_snapshot_steps))
    log.seed = seed
    log.cfg_hash = setup.cfg_hash
    return log


def _grid_points(setup: ExperimentSetup) -> np.ndarray:
    cfg = setup.cfg
    if cfg.grid_bounds is not None:
        lo, hi = cfg.grid_bounds[0], cfg.grid_bounds[1]
    else:
        verts = vertices_2d(setup.data.X).points
        lo, hi = verts.min(axis=0), verts.max(axis=0)
    axes = [np.arange(l, u + 1e-12, cfg.grid_spacing) for l, u in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def roa_grid(setup: ExperimentSetup, variants=VARIANTS, points: np.ndarray | None = None,
             rho: float | None = None) -> RoaGrid:
    """Feasibility status of each controller variant over a state grid.

    The three variants share one grid: the fixed-tube baseline on the
    offline tubes, the tube-fusing controller on {offline tubes, one
    tube-optimized entry at the configured seed state}, and the full
    tube-optimizing problem. Points outside the state constraints are
    marked infeasible without solving.
    """
    cfg = setup.cfg
    data, terminal = setup.data, setup.terminal
    if points is None:
        points = _grid_points(setup)
    rho = cfg.rho if rho is None else rho

    templates = {}
    origin = np.zeros(data.model.n)
    if "fixed_tube_baseline" in variants:
        templates["fixed_tube_baseline"] = build_fixed_tube(data, terminal, setup.drs_entry, origin)
    if "primary_async" in variants:
        seed_entry = setup.seed_entry(cost_mode="nominal")
        if seed_entry is None:
            raise RuntimeError("tube optimizer infeasible at the configured seed state")
        entries = [setup.drs_entry, seed_entry]
        templates["primary_async"] = build_primary(data, terminal, entries, origin, rho=rho, step=0)
    if "full_sltmpc" in variants:
        templates["full_sltmpc"] = build_sltmpc(data, terminal, origin)

    statuses: dict[str, list[str]] = {v: [] for v in variants}
    for x in points:
        inside = contains(data.X, x)
        for v in variants:
            if not inside:
                statuses[v].append("infeasible")
                continue
            res = solve(with_initial_state(templates[v], x), setup.settings)
            if res.status == "optimal":
                statuses[v].append("feasible")
            elif res.status == "infeasible":
                statuses[v].append("infeasible")
            else:
                statuses[v].append("solver-failure")
    return RoaGrid(points=points, spacing=cfg.grid_spacing, statuses=statuses,
                   cfg_hash=setup.cfg_hash)


@dataclass
class BenchResult:
    times: dict[str, list[float]]  # seconds per solve
    summary: dict[str, dict[str, float]]  # variant -> mean/median/p95 in ms
    ratios: dict[str, float]
    cfg_hash: str | None = None


def bench_solve_times(setup: ExperimentSetup, n_repeats: int = 100,
                      states: np.ndarray | None = None) -> BenchResult:
    """Wall-time statistics for the three problem classes at matched states.

    States default to a nominal (disturbance-free) closed-loop prefix from
    the configured initial state, recycled to ``n_repeats``; every variant
    is solved at the same state sequence. One warmup solve per variant is
    excluded.
    """
    if n_repeats < 30:
        raise ValueError("need at least 30 repeats for stable statistics")
    data, terminal = setup.data, setup.terminal
    if states is None:
        log = simulate(setup, seed=setup.cfg.seed, schedule_override=str(10**9),
                       steps=12, disturbance_mode="uniform")
        base = [r.x for r in log.records]
        states = np.array([base[i % len(base)] for i in range(n_repeats)])

    seed_entry = setup.seed_entry(cost_mode="nominal")
    entries = [setup.drs_entry] + ([seed_entry] if seed_entry is not None else [])
    origin = np.zeros(data.model.n)
    templates = {
        "fixed_tube_baseline": build_fixed_tube(data, terminal, setup.drs_entry, origin),
        "primary_async": build_primary(data, terminal, entries, origin, rho=setup.cfg.rho),
        "full_sltmpc": build_sltmpc(data, terminal, origin),
    }
    times: dict[str, list[float]] = {v: [] for v in templates}
    for v, tmpl in templates.items():
        solve(with_initial_state(tmpl, states[0]), setup.settings)  # warmup
        for x in states:
            res = solve(with_initial_state(tmpl, x), setup.settings)
            if res.status != "optimal":
                raise RuntimeError(f"benchmark state not solvable for {v}: {res.status}")
            times[v].append(res.solve_time)

    summary = {}
    for v, ts in times.items():
        ms = [1e3 * t for t in ts]
        ms_sorted = sorted(ms)
        p95 = ms_sorted[min(len(ms_sorted) - 1, int(round(0.95 * (len(ms_sorted) - 1))))]
        summary[v] = {"mean_ms": statistics.fmean(ms), "median_ms": statistics.median(ms),
                      "p95_ms": p95}
    ratios = {
        "primary_over_full": summary["primary_async"]["mean_ms"] / summary["full_sltmpc"]["mean_ms"],
        "primary_over_fixed": summary["primary_async"]["mean_ms"] / summary["fixed_tube_baseline"]["mean_ms"],
    }
    return BenchResult(times=times, summary=summary, ratios=ratios, cfg_hash=setup.cfg_hash)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _trajectory_csv_text(log: TrajectoryLog, include_timing: bool = True) -> str:
    if not log.records:
        raise ValueError("empty trajectory log")
    n = log.records[0].x.size
    m = log.records[0].u.size
    M = log.capacity
    lines = []
    if log.cfg_hash is not None:
        lines.append(f"# config_hash={log.cfg_hash}")
    header = (["k"] + [f"x{i+1}" for i in range(n)] + [f"u{i+1}" for i in range(m)]
              + [f"w{i+1}" for i in range(n)] + [f"lambda_{j}" for j in range(M)]
              + ["objective", "solve_time_ms", "mem_event"])
    lines.append(",".join(header))
    for r in log.records:
        lam = np.zeros(M)
        lam[:r.lam.size] = r.lam
        row = ([str(r.k)] + [_fmt(v) for v in r.x] + [_fmt(v) for v in r.u]
               + [_fmt(v) for v in r.w] + [_fmt(v) for v in lam]
               + [_fmt(r.objective),
                  _fmt(1e3 * r.solve_time) if include_timing else _fmt(0.0),
                  r.mem_event])
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_trajectory_csv(log: TrajectoryLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_trajectory_csv_text(log, include_timing=True))


def write_roa_csv(grid: RoaGrid, path) -> None:
    n = grid.points.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        if grid.cfg_hash is not None:
            fh.write(f"# config_hash={grid.cfg_hash}\n")
        fh.write(",".join([f"x{i+1}" for i in range(n)] + ["variant", "status"]) + "\n")
        for variant, sts in grid.statuses.items():
            for x, s in zip(grid.points, sts):
                fh.write(",".join([_fmt(v) for v in x] + [variant, s]) + "\n")


def tube_polygons(H_x: np.ndarray, t_x: np.ndarray) -> list[np.ndarray]:
    """Materialize tube cross-sections ``{x | H_x x <= t_x[i]}`` as polygons.

    Steps whose tightening is (numerically) zero produce the single point
    at the origin.
    """
    polys = []
    for i in range(t_x.shape[0]):
        t = t_x[i]
        if np.max(t) <= 1e-12:
            polys.append(np.zeros((1, H_x.shape[1])))
            continue
        try:
            polys.append(vertices_2d(HPolytope(H_x, t)).points)
        except PolytopeError:
            polys.append(np.zeros((1, H_x.shape[1])))
    return polys


def write_tubes_csv(groups: dict[int, list[np.ndarray]], path, cfg_hash: str | None = None) -> None:
    """Write tube polygons; ``groups`` maps an entry id to per-step polygons."""
    with open(path, "w", encoding="utf-8") as fh:
        if cfg_hash is not None:
            fh.write(f"# config_hash={cfg_hash}\n")
        fh.write("entry_id,step_i,vertex_index,vx1,vx2\n")
        for entry_id, polys in groups.items():
            for i, poly in enumerate(polys):
                for vi, v in enumerate(poly):
                    fh.write(f"{entry_id},{i},{vi},{_fmt(v[0])},{_fmt(v[1])}\n")


def write_bench_csv(bench: BenchResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if bench.cfg_hash is not None:
            fh.write(f"# config_hash={bench.cfg_hash}\n")
        fh.write("variant,mean_ms,median_ms,p95_ms\n")
        for v, s in bench.summary.items():
            fh.write(f"{v},{_fmt(s['mean_ms'])},{_fmt(s['median_ms'])},{_fmt(s['p95_ms'])}\n")
