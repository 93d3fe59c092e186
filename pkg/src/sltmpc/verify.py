"""Self-contained invariant battery behind the ``verify`` subcommand.

Each check returns ``(name, passed, detail)``; the CLI prints one line per
check and fails the run when any check fails. The checks mirror the
package's structural guarantees: offline synthesis certificates, tube
recursion identities, memory-update safety, candidate feasibility after a
step, and run determinism.
"""

from __future__ import annotations

import numpy as np

from . import runtime, sim, slp
from .model import drs_response, verify_lyapunov
from .ocp import build_fixed_tube, build_primary, solve
from .polytope import (
    HPolytope,
    check_containment_certificate,
    contains,
    pontryagin_tighten,
    scale,
    support,
)

Check = tuple[str, bool, str]


def _riccati(setup) -> Check:
    d, t = setup.data, setup.terminal
    A, B, Q, R = d.model.A, d.model.B, d.Q, d.R
    P = t.P
    G = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    resid = np.max(np.abs(Q + A.T @ P @ A - (A.T @ P @ B) @ G - P))
    return ("riccati-fixed-point", resid < 1e-10, f"residual {resid:.2e}")


def _lyapunov(setup) -> Check:
    d, t = setup.data, setup.terminal
    ok = verify_lyapunov(d.model, t.P, t.K_f, d.Q, d.R)
    return ("terminal-lyapunov", ok, "decrease inequality holds")


def _rpi_vertices(setup) -> Check:
    d, t = setup.data, setup.terminal
    A_cl = d.model.A + d.model.B @ t.K_f
    worst = -np.inf
    for v in t.X_f_vertices.points:
        for w in d.W_vertices.points:
            worst = max(worst, np.max(t.X_f.H @ (A_cl @ v + w) - t.X_f.h))
    return ("terminal-set-invariance", worst <= setup.cfg.mrpi_eps, f"worst margin {worst:.2e}")


def _support_subadditive(setup, samples: int = 200) -> Check:
    rng = np.random.default_rng(1)
    V = setup.data.W_vertices
    worst = 0.0
    for _ in range(samples):
        e1 = rng.standard_normal(V.dim)
        e2 = rng.standard_normal(V.dim)
        gap = support(V, e1 + e2) - support(V, e1) - support(V, e2)
        worst = max(worst, gap)
    return ("support-subadditivity", worst <= 1e-12, f"worst gap {worst:.2e}")


def _pontryagin_duality(setup, samples: int = 50) -> Check:
    rng = np.random.default_rng(2)
    d = setup.data
    inner = pontryagin_tighten(d.X, d.W_vertices)
    ok = True
    for _ in range(samples):
        # Random point of (X - W) (+) W must lie in X.
        zeta = rng.uniform(-1, 1, d.model.n)
        x = _support_point(inner, zeta)
        w = d.W_vertices.points[rng.integers(len(d.W_vertices))]
        ok = ok and contains(d.X, x + w, 1e-9)
    return ("tighten-then-add-inclusion", ok, f"{samples} samples")


def _support_point(P: HPolytope, direction: np.ndarray) -> np.ndarray:
    from scipy.optimize import linprog
    res = linprog(-direction, A_ub=P.H, b_ub=P.h, bounds=[(None, None)] * P.dim, method="highs")
    return res.x


def _scale_composition(setup) -> Check:
    X = setup.data.X
    # Power-of-two factors make the float products associative, so the
    # composition identity holds bitwise.
    lhs = scale(scale(X, 0.5), 0.25)
    rhs = scale(X, 0.125)
    ok = np.array_equal(lhs.h, rhs.h)
    return ("scale-composition", ok, "offsets compose exactly")


def _tube_structure(setup) -> Check:
    d = setup.data
    entry = setup.drs_entry
    t = entry.tubes
    ok = np.all(t.t_x[0] == 0.0) and np.all(t.t_u[0] == 0.0)
    ok = ok and np.all(np.diff(t.t_x, axis=0) >= -1e-12)
    Wv = d.W_vertices.points
    for i in range(1, d.N + 1):
        inc = np.max(d.X.H @ entry.response.phi_x[i - 1] @ Wv.T, axis=1)
        ok = ok and np.allclose(t.t_x[i] - t.t_x[i - 1], inc, atol=1e-12)
    return ("tube-recursion", bool(ok), "zero start, monotone, exact increments")


def _response_validation(setup) -> Check:
    d = setup.data
    ok = slp.validate_response(setup.drs_entry.response, d.model)
    bad = drs_response(d.model, np.zeros((d.model.m, d.model.n)), d.N)
    bad = slp.SystemResponse(phi_x=(np.zeros_like(bad.phi_x[0]),) + bad.phi_x[1:],
                             phi_u=bad.phi_u)
    ok = ok and not slp.validate_response(bad, d.model)
    return ("response-validation", ok, "recursion accepted, broken first block rejected")


def _entry_certificates(setup) -> Check:
    d, t = setup.data, setup.terminal
    entry = setup.seed_entry(cost_mode="nominal")
    if entry is None:
        return ("secondary-entry-certificate", False, "tube optimizer infeasible at seed state")
    A_cl = d.model.A + d.model.B @ t.K_f
    ok = check_containment_certificate(entry.lam_cert, entry.alpha, entry.alpha, A_cl, entry.tubes.gamma,
                      t.X_f, t.X_f, d.W_vertices)
    rng = np.random.default_rng(3)
    samples = 200
    scaled = scale(t.X_f, entry.alpha)
    for _ in range(samples):
        lam_pt = rng.dirichlet(np.ones(len(t.X_f_vertices)))
        xf = entry.alpha * (lam_pt @ t.X_f_vertices.points)
        w = sim.sample_disturbance(d.W, rng)
        ok = ok and contains(scaled, A_cl @ xf + entry.tubes.gamma @ w, 1e-7)
        if not ok:
            break
    return ("secondary-entry-certificate", bool(ok), f"certificate and {samples} sampled points")


def _algorithm1(setup) -> Check:
    e = setup.drs_entry
    mem = runtime.Memory(capacity=2)
    mem, ev1 = runtime.update_memory(e, mem)
    ok = ev1.kind == "insert" and ev1.slot == 0
    mem, ev2 = runtime.update_memory(e, mem)
    ok = ok and ev2.kind == "insert" and ev2.slot == 1
    mem.last_lambda = np.array([1.0, 0.0])
    mem, ev3 = runtime.update_memory(e, mem)
    ok = ok and ev3.kind == "replace" and ev3.slot == 1
    mem.last_lambda = np.array([0.5, 0.5])
    mem, ev4 = runtime.update_memory(e, mem)
    ok = ok and ev4.kind == "discard"
    return ("memory-update-rule", ok, "insert/insert/replace/discard")


def _fixed_tube_equivalence(setup) -> Check:
    d, t = setup.data, setup.terminal
    x = np.asarray(setup.cfg.x0, dtype=float)
    r1 = solve(build_fixed_tube(d, t, setup.drs_entry, x), setup.settings)
    r2 = solve(build_primary(d, t, [setup.drs_entry], x, rho=setup.cfg.rho), setup.settings)
    if r1.status != "optimal" or r2.status != "optimal":
        return ("single-entry-equivalence", False, f"{r1.status}/{r2.status}")
    dev = np.max(np.abs(r1.values["v"] - r2.values["v"]))
    return ("single-entry-equivalence", dev <= 1e-6, f"max input deviation {dev:.2e}")


def _candidate_feasibility(setup, steps: int = 8) -> Check:
    d, t = setup.data, setup.terminal
    rng = np.random.default_rng(4)
    x = np.asarray(setup.cfg.x0, dtype=float)
    memory = setup.initial_memory(x)
    state = setup.controller_state(memory)
    worst = 0.0
    for k in range(steps):
        state.k = k
        u, diag = runtime.primary_step(state, x)
        w = sim.sample_disturbance(d.W, rng)
        x_next = d.model.A @ x + d.model.B @ u + w
        cand = runtime.shift_candidate(d, t, state.memory.entries, diag.result, w,
                                       runtime.MemoryEvent("none"))
        spec_next = build_primary(d, t, state.memory.entries, x_next,
                                  rho=setup.cfg.rho, step=k + 1)
        worst = max(worst, runtime.candidate_violation(spec_next, cand))
        x = x_next
    return ("shifted-candidate-feasibility", worst <= 1e-6, f"worst violation {worst:.2e}")


def _determinism(setup) -> Check:
    log1 = sim.simulate(setup, steps=min(setup.cfg.steps, 8))
    log2 = sim.simulate(setup, steps=min(setup.cfg.steps, 8))
    ok = log1.canonical_bytes() == log2.canonical_bytes()
    return ("run-determinism", ok, "identical canonical logs for identical seeds")


def _closed_loop_constraints(setup) -> Check:
    log = sim.simulate(setup, steps=min(setup.cfg.steps, 12))
    d = setup.data
    ok = all(contains(d.X, r.x, 1e-6) and contains(d.U, r.u, 1e-6) for r in log.records)
    return ("closed-loop-constraints", ok, f"{len(log.records)} steps inside X and U")


def run_all(setup) -> list[Check]:
    checks = [
        _riccati, _lyapunov, _rpi_vertices, _support_subadditive, _pontryagin_duality,
        _scale_composition, _tube_structure, _response_validation, _entry_certificates,
        _algorithm1, _fixed_tube_equivalence, _candidate_feasibility, _determinism,
        _closed_loop_constraints,
    ]
    results = []
    for fn in checks:
        try:
            results.append(fn(setup))
        except Exception as exc:  # a crashed check is a failed check
            results.append((fn.__name__.strip("_"), False, f"{type(exc).__name__}: {exc}"))
    return results
