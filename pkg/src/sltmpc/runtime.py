"""Asynchronous controller mechanics: tube memory, primary step, secondary task.

The primary loop owns the memory and is strictly sequential; secondary
tube optimizations run either synchronously on a period (deterministic,
used by all verification runs) or in a single background task. Results
are only folded into the memory at loop boundaries, so the weight vector
from the previous solve always refers to the slot layout the update rule
inspects.
"""

from __future__ import annotations

from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import ProblemData, TerminalIngredients, step_dynamics
from .ocp import (
    MemoryEntry,
    ProblemSpec,
    SolveResult,
    SolverSettings,
    build_primary,
    build_sltmpc,
    extract_control,
    memory_entry_from_secondary,
    solve,
    with_initial_state,
)

ZERO_LAMBDA_TOL = 1e-9


class InfeasiblePrimaryError(RuntimeError):
    """Primary problem infeasible: an assumption was violated.

    Carries a full snapshot for postmortem analysis; under the standing
    assumptions this can only happen for disturbances outside the modeled
    set or a numerical tolerance breach.
    """

    def __init__(self, x, step, memory, result):
        self.x = np.array(x)
        self.step = step
        self.memory = memory
        self.result = result
        super().__init__(
            f"primary problem {result.status} at step {step}, x={np.array2string(self.x)}"
        )


@dataclass(frozen=True)
class MemoryEvent:
    """Outcome of one memory-update attempt."""

    kind: str  # 'none' | 'insert' | 'replace' | 'discard'
    slot: int | None = None

    def __str__(self) -> str:
        if self.kind in ("insert", "replace"):
            return f"{self.kind}({self.slot})"
        return self.kind


@dataclass
class Memory:
    """Bounded store of certified tube entries plus the last weight vector."""

    capacity: int
    entries: list[MemoryEntry] = field(default_factory=list)
    last_lambda: np.ndarray | None = None

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory capacity must be at least 1")
        if len(self.entries) > self.capacity:
            raise ValueError("more entries than capacity")

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.capacity


def update_memory(m_new: MemoryEntry, memory: Memory,
                  zero_tol: float = ZERO_LAMBDA_TOL) -> tuple[Memory, MemoryEvent]:
    """Fold a new entry into the memory without breaking feasibility.

    Empty slots are filled first; otherwise the new entry may only evict a
    slot whose weight was (numerically) zero in the last primary solve,
    because the shifted feasible candidate puts zero weight there. If no
    such slot exists the new entry is discarded. Slot indices are stable
    across replacement.
    """
    if not memory.full:
        slot = len(memory.entries)
        lam = memory.last_lambda
        if lam is not None:
            lam = np.append(lam, 0.0)
        return (Memory(capacity=memory.capacity, entries=memory.entries + [m_new],
                       last_lambda=lam), MemoryEvent("insert", slot))
    lam = memory.last_lambda
    if lam is not None:
        zero_slots = np.flatnonzero(lam <= zero_tol)
        if zero_slots.size:
            slot = int(zero_slots[0])
            entries = list(memory.entries)
            entries[slot] = m_new
            new_lam = lam.copy()
            new_lam[slot] = 0.0
            return (Memory(capacity=memory.capacity, entries=entries, last_lambda=new_lam),
                    MemoryEvent("replace", slot))
    return memory, MemoryEvent("discard")


@dataclass
class Schedule:
    """Secondary-process scheduling: synchronous every ``period`` steps, or background."""

    kind: str = "periodic"  # 'periodic' | 'background'
    period: int | None = 5

    def __post_init__(self):
        if self.kind not in ("periodic", "background"):
            raise ValueError(f"unknown schedule kind '{self.kind}'")
        if self.kind == "periodic" and (self.period is None or self.period < 1):
            raise ValueError("periodic schedule needs a period >= 1")


@dataclass
class ControllerState:
    """Everything the primary loop owns: problem data, memory, counters."""

    data: ProblemData
    terminal: TerminalIngredients
    memory: Memory
    k: int = 0
    rho: float = 1e-3
    solver: SolverSettings = field(default_factory=SolverSettings)
    secondary_cost: str = "nominal"
    tightening_mu: float = 1e-3
    _template: ProblemSpec | None = field(default=None, repr=False)
    _template_key: tuple | None = field(default=None, repr=False)


@dataclass(frozen=True)
class PrimaryDiagnostics:
    """Per-step information returned alongside the applied input."""

    lam: np.ndarray
    objective: float
    solve_time: float
    active_state_rows: tuple[tuple[int, int], ...]
    active_input_rows: tuple[tuple[int, int], ...]
    result: SolveResult


def _primary_spec(state: ControllerState, x) -> ProblemSpec:
    """Primary problem at ``x``, reusing the cached template when the memory layout allows.

    Only the initial-state rows and the age-dependent weight penalty change
    between steps with an unchanged memory, so the sparse matrices are
    shared and re-anchored instead of rebuilt.
    """
    key = tuple(id(e) for e in state.memory.entries)
    if state._template is None or state._template_key != key:
        spec = build_primary(state.data, state.terminal, state.memory.entries, x,
                             rho=state.rho, step=state.k)
        state._template = spec
        state._template_key = key
        return spec
    spec = state._template
    lo, hi = spec.initial_rows
    b_eq = spec.b_eq.copy()
    b_eq[lo:hi] = np.asarray(x, dtype=float).reshape(hi - lo)
    q = spec.q.copy()
    ages = np.array([max(state.k - e.birth_step, 0) for e in state.memory.entries], dtype=float)
    q[spec.var_slices["lam"]] = state.rho * ages
    return ProblemSpec(tag=spec.tag, var_slices=spec.var_slices, n_vars=spec.n_vars,
                       A_eq=spec.A_eq, b_eq=b_eq, A_in=spec.A_in, b_in=spec.b_in,
                       P=spec.P, q=q, initial_rows=spec.initial_rows, meta=spec.meta)


def primary_step(state: ControllerState, x, active_tol: float = 1e-6):
    """One control computation: solve the fused problem and apply its first input.

    Stores the optimal weight vector for the next memory update. An
    infeasible or failed solve is a hard error with a state snapshot.
    """
    if not state.memory.entries:
        raise ValueError("memory is empty; at least one certified entry is required")
    spec = _primary_spec(state, x)
    res = solve(spec, state.solver)
    if res.status != "optimal":
        raise InfeasiblePrimaryError(x, state.k, state.memory, res)
    lam = np.array(res.values["lam"])
    state.memory.last_lambda = lam
    u = extract_control(res)

    data = state.data
    N, n, m = data.N, data.model.n, data.model.m
    z = res.values["z"]
    v = res.values["v"]
    active_x, active_u = [], []
    for i in range(N):
        bound_x = sum(l * (data.X.h - e.tubes.t_x[i])
                      for l, e in zip(lam, state.memory.entries))
        gap = bound_x - data.X.H @ z[i * n:(i + 1) * n]
        active_x.extend((i, int(r)) for r in np.flatnonzero(gap <= active_tol))
        bound_u = sum(l * (data.U.h - e.tubes.t_u[i])
                      for l, e in zip(lam, state.memory.entries))
        gap = bound_u - data.U.H @ v[i * m:(i + 1) * m]
        active_u.extend((i, int(r)) for r in np.flatnonzero(gap <= active_tol))
    diag = PrimaryDiagnostics(lam=lam, objective=res.objective, solve_time=res.solve_time,
                              active_state_rows=tuple(active_x),
                              active_input_rows=tuple(active_u), result=res)
    return u, diag


def run_secondary(data: ProblemData, terminal: TerminalIngredients, x_snapshot,
                  cost_mode: str = "nominal", terminal_mode: str = "scaled",
                  birth_step: int = 0, settings: SolverSettings = SolverSettings(),
                  mu: float = 1e-3, template: ProblemSpec | None = None) -> MemoryEntry | None:
    """One tube optimization on a state snapshot, returning a certified entry.

    Returns ``None`` when the problem is infeasible at the snapshot (or the
    solver fails on it): the primary process is unaffected in that case.
    Certificate re-verification failures raise, since they indicate a
    solver tolerance breach rather than a legitimate outcome. A prebuilt
    ``template`` (same data, modes, and mu) is re-anchored instead of
    rebuilding the problem, which matters in tight loops.
    """
    if template is not None:
        spec = with_initial_state(template, x_snapshot)
    else:
        spec = build_sltmpc(data, terminal, x_snapshot,
                            terminal_mode=terminal_mode, cost_mode=cost_mode, mu=mu)
    res = solve(spec, settings)
    if res.status != "optimal":
        return None
    return memory_entry_from_secondary(data, terminal, res, birth_step, settings=settings)


def fused_tightenings(entries: list[MemoryEntry], lam) -> tuple[np.ndarray, np.ndarray]:
    """Weight-averaged tube tightenings actually constraining the primary problem."""
    lam = np.asarray(lam, dtype=float)
    t_x = sum(l * e.tubes.t_x for l, e in zip(lam, entries))
    t_u = sum(l * e.tubes.t_u for l, e in zip(lam, entries))
    return np.asarray(t_x), np.asarray(t_u)


def run_closed_loop(state: ControllerState, x0, schedule: Schedule, steps: int,
                    rng: np.random.Generator, disturbance=None,
                    snapshot_steps: tuple[int, ...] = (), pace: float = 0.0):
    """Simulate the controlled plant for ``steps`` steps.

    Per step: fold in any finished secondary result (loop boundary), solve
    the primary problem, apply its input together with a sampled
    disturbance. The periodic schedule runs the secondary synchronously on
    the current state every ``period`` steps, which makes runs exactly
    reproducible; the background schedule runs it concurrently on a
    snapshot and folds the result in at the first boundary after
    completion. ``pace`` sleeps that many seconds per step, emulating a
    sampling period so background results have wall time to land.
    """
    import time as _time

    from .sim import StepRecord, TrajectoryLog

    data = state.data
    if disturbance is None:
        disturbance = lambda _rng: np.zeros(data.model.n)
    x = np.asarray(x0, dtype=float).reshape(data.model.n)
    records: list[StepRecord] = []
    tube_snapshots: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    executor: ThreadPoolExecutor | None = None
    pending: Future | None = None
    secondary_template: list[ProblemSpec | None] = [None]

    def secondary_on(x_snap, k):
        if secondary_template[0] is None:
            secondary_template[0] = build_sltmpc(data, state.terminal,
                                                 np.zeros(data.model.n),
                                                 cost_mode=state.secondary_cost,
                                                 mu=state.tightening_mu)
        return run_secondary(data, state.terminal, x_snap,
                             cost_mode=state.secondary_cost, birth_step=k,
                             settings=state.solver, mu=state.tightening_mu,
                             template=secondary_template[0])

    try:
        if schedule.kind == "background":
            executor = ThreadPoolExecutor(max_workers=1)
        for k in range(steps):
            state.k = k
            event = MemoryEvent("none")
            if schedule.kind == "periodic":
                if k > 0 and k % schedule.period == 0:
                    entry = secondary_on(x, k)
                    if entry is not None:
                        state.memory, event = update_memory(entry, state.memory)
                        state._template = None
            else:
                if pending is not None and pending.done():
                    entry = pending.result()
                    pending = None
                    if entry is not None:
                        state.memory, event = update_memory(entry, state.memory)
                        state._template = None
                if pending is None:
                    pending = executor.submit(secondary_on, x.copy(), k)

            try:
                u, diag = primary_step(state, x)
            except InfeasiblePrimaryError as exc:
                exc.partial_log = TrajectoryLog(records=records,
                                                capacity=state.memory.capacity,
                                                tube_snapshots=tube_snapshots)
                raise
            w = np.asarray(disturbance(rng), dtype=float).reshape(data.model.n)
            if k in snapshot_steps:
                tube_snapshots[k] = fused_tightenings(state.memory.entries, diag.lam)
            records.append(StepRecord(k=k, x=x.copy(), u=np.array(u), w=w.copy(),
                                      lam=np.array(diag.lam), objective=diag.objective,
                                      solve_time=diag.solve_time, mem_event=str(event)))
            x = step_dynamics(data.model, x, u, w)
            if pace > 0.0:
                _time.sleep(pace)
    finally:
        if executor is not None:
            executor.shutdown(wait=True, cancel_futures=True)
    return TrajectoryLog(records=records, capacity=state.memory.capacity,
                         tube_snapshots=tube_snapshots)


def shift_candidate(data: ProblemData, terminal: TerminalIngredients,
                    entries_prev: list[MemoryEntry], result: SolveResult,
                    w, event: MemoryEvent) -> dict[str, np.ndarray]:
    """Feasible candidate for the next-step primary problem by shifting.

    Each retained entry's decomposed trajectory is shifted one step and
    corrected by its own response to the realized disturbance; the
    terminal piece reuses the terminal gain on the split terminal state.
    Slots that were replaced (weight was zero) or freshly inserted get an
    exactly zero candidate, which keeps them from constraining anything.
    """
    N, n, m = data.N, data.model.n, data.model.m
    lam = result.values["lam"]
    M_prev = lam.size
    alphas = np.array([e.alpha for e in entries_prev])
    alpha_bar = float(lam @ alphas)
    zN = result.values["z"][N * n:]
    w = np.asarray(w, dtype=float).reshape(n)

    slots = list(range(M_prev))
    if event.kind == "insert":
        slots.append(None)  # brand-new slot, zero weight
    replaced = event.slot if event.kind == "replace" else None

    lam_hat = []
    zetas, nus = [], []
    for j, src in enumerate(slots):
        if src is None or src == replaced:
            lam_hat.append(0.0)
            zetas.append(np.zeros(N * n))
            nus.append(np.zeros(N * m))
            continue
        e = entries_prev[src]
        lj = float(lam[src])
        zeta_prev = result.values[f"zeta_{src}"]
        nu_prev = result.values[f"nu_{src}"]
        ratio = (e.alpha / alpha_bar) if alpha_bar > 0.0 else 0.0
        zeta_hat = np.zeros(N * n)
        nu_hat = np.zeros(N * m)
        for i in range(N - 1):
            zeta_hat[i * n:(i + 1) * n] = (zeta_prev[(i + 1) * n:(i + 2) * n]
                                           + lj * (e.response.phi_x[i] @ w))
            nu_hat[i * m:(i + 1) * m] = (nu_prev[(i + 1) * m:(i + 2) * m]
                                         + lj * (e.response.phi_u[i] @ w))
        # Last decomposed step comes from the split terminal state.
        zeta_hat[(N - 1) * n:] = lj * ratio * zN + lj * (e.response.phi_x[N - 1] @ w)
        nu_hat[(N - 1) * m:] = lj * ratio * (terminal.K_f @ zN) + lj * (e.response.phi_u[N - 1] @ w)
        lam_hat.append(lj)
        zetas.append(zeta_hat)
        nus.append(nu_hat)

    # Aggregates; the final state follows the nominal dynamics exactly.
    z_hat = np.zeros((N + 1) * n)
    v_hat = np.zeros(N * m)
    for i in range(N):
        z_hat[i * n:(i + 1) * n] = sum(zeta[i * n:(i + 1) * n] for zeta in zetas)
        v_hat[i * m:(i + 1) * m] = sum(nu[i * m:(i + 1) * m] for nu in nus)
    z_hat[N * n:] = data.model.A @ z_hat[(N - 1) * n:N * n] + data.model.B @ v_hat[(N - 1) * m:]

    values = {"z": z_hat, "v": v_hat, "lam": np.array(lam_hat)}
    for j, (zeta, nu) in enumerate(zip(zetas, nus)):
        values[f"zeta_{j}"] = zeta
        values[f"nu_{j}"] = nu
    return values


def candidate_violation(spec_next: ProblemSpec, candidate: dict[str, np.ndarray]) -> float:
    """Largest constraint violation of a candidate in the next-step problem."""
    x = spec_next.stack(candidate)
    r_eq, r_in = spec_next.residuals(x)
    return max(r_eq, r_in)
