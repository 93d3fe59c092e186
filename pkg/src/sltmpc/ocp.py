"""Convex program builders for the tube controller family, plus the solver contract.

Every optimization problem in the controller (tube-optimizing secondary
problem, fixed-tube baseline, tube-fusing primary problem, and the small
terminal-scaling LPs) is assembled into the same solver-agnostic
``ProblemSpec`` form: named variables, sparse linear equalities and
inequalities, and a convex quadratic cost. ``solve`` hands that to an
interior-point conic solver and re-verifies the KKT residuals before
reporting optimality.

Encoding notes:

* State response blocks are eliminated through the realizability
  recursion, so only the input response blocks ``phi_1 .. phi_N`` are
  decision variables; ``Phi_x^j`` enters constraints as the affine
  expression ``A^(j-1) + sum_l A^(j-1-l) B phi_l``.
* Supports of response-mapped disturbance sets are encoded exactly by
  enumerating disturbance vertices, with per-step epigraph variables
  ``sx_j >= H_x Phi_x^j w_v`` (resp. ``su_j``).
* The scaled terminal-set decrease condition is imposed through its
  nonnegative certificate matrix ``Lam``; the state/input inclusion
  conditions use precomputed supports of the terminal set, which is exact
  because the terminal set is a fixed shape under a decision scaling.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse as sp

import clarabel

from . import slp
from .polytope import check_containment_certificate

if TYPE_CHECKING:
    from .model import ProblemData, TerminalIngredients


class OcpError(ValueError):
    """Malformed problem description or misuse of a solver result."""


class EntryCertificationError(RuntimeError):
    """A tube/terminal-set combination could not be certified."""


# Upper cap for terminal scalings. Scalings are only geometrically
# meaningful up to the constraint-set inclusion caps (order 1); the cap
# bounds the scaling LP in the degenerate no-disturbance case, where the
# terminal set is {0} and any scaling of it is equivalent.
ALPHA_CAP = 1e6


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable convex quadratic program over named variables.

    ``P`` is the upper triangle of the quadratic cost in the solver's
    ``1/2 x'Px + q'x`` convention (so the stored matrix is twice the
    mathematical cost matrix and objective values equal the mathematical
    cost). ``initial_rows`` marks the equality rows pinning the initial
    state, so a spec can be re-anchored cheaply with ``with_initial_state``.
    """

    tag: str
    var_slices: dict[str, slice]
    n_vars: int
    A_eq: sp.csc_matrix
    b_eq: np.ndarray
    A_in: sp.csc_matrix
    b_in: np.ndarray
    P: sp.csc_matrix
    q: np.ndarray
    initial_rows: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def stack(self, values: dict[str, np.ndarray]) -> np.ndarray:
        """Assemble a full decision vector from per-variable values."""
        x = np.zeros(self.n_vars)
        for name, sl in self.var_slices.items():
            if name not in values:
                raise OcpError(f"missing value for variable '{name}'")
            x[sl] = np.asarray(values[name], dtype=float).reshape(-1)
        return x

    def split(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return {name: np.array(x[sl]) for name, sl in self.var_slices.items()}

    def residuals(self, x: np.ndarray) -> tuple[float, float]:
        """Max equality residual and max inequality violation at ``x``."""
        r_eq = 0.0 if self.A_eq.shape[0] == 0 else float(np.max(np.abs(self.A_eq @ x - self.b_eq)))
        r_in = 0.0 if self.A_in.shape[0] == 0 else float(np.max(self.A_in @ x - self.b_in, initial=0.0))
        return r_eq, r_in

    def objective_value(self, x: np.ndarray) -> float:
        Px = self.P @ x
        quad = float(x @ Px) - 0.5 * float(x @ (self.P.diagonal() * x))
        # P stores the upper triangle; x'Px over triu counts off-diagonals
        # once, so the full symmetric quadratic form is 2*triu - diag.
        return quad + float(self.q @ x)

    def to_text(self) -> str:
        """Human-readable diagnostic dump (not a stable format)."""
        lines = [f"ProblemSpec tag={self.tag} n_vars={self.n_vars}"]
        for name, sl in self.var_slices.items():
            lines.append(f"  var {name}: [{sl.start}:{sl.stop}]")
        lines.append(f"  eq: {self.A_eq.shape[0]} rows, nnz={self.A_eq.nnz}")
        lines.append(f"  ineq: {self.A_in.shape[0]} rows, nnz={self.A_in.nnz}")
        lines.append(f"  cost nnz={self.P.nnz}, |q|inf={0.0 if self.q.size == 0 else np.max(np.abs(self.q)):.3e}")
        lines.append(f"  meta={self.meta}")
        return "\n".join(lines)


def with_initial_state(spec: ProblemSpec, x0) -> ProblemSpec:
    """Copy of ``spec`` with the initial-state equality re-anchored at ``x0``."""
    if spec.initial_rows is None:
        raise OcpError("spec has no initial-state rows to replace")
    lo, hi = spec.initial_rows
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.size != hi - lo:
        raise OcpError(f"initial state must have {hi - lo} entries, got {x0.size}")
    b_eq = spec.b_eq.copy()
    b_eq[lo:hi] = x0
    return ProblemSpec(tag=spec.tag, var_slices=spec.var_slices, n_vars=spec.n_vars,
                       A_eq=spec.A_eq, b_eq=b_eq, A_in=spec.A_in, b_in=spec.b_in,
                       P=spec.P, q=spec.q, initial_rows=spec.initial_rows, meta=spec.meta)


class SpecBuilder:
    """Accumulates sparse constraint blocks keyed by variable name."""

    def __init__(self, tag: str):
        self.tag = tag
        self._sizes: dict[str, int] = {}
        self._eq_blocks: list[tuple[dict, np.ndarray]] = []
        self._in_blocks: list[tuple[dict, np.ndarray]] = []
        self._quad: dict[str, np.ndarray] = {}
        self._lin: dict[str, np.ndarray] = {}
        self._initial_rows: tuple[int, int] | None = None
        self._eq_rows = 0
        self.meta: dict = {}

    def add_var(self, name: str, size: int) -> None:
        if name in self._sizes:
            raise OcpError(f"variable '{name}' declared twice")
        self._sizes[name] = int(size)

    def _check(self, coeffs: dict, rhs: np.ndarray) -> None:
        k = rhs.size
        for name, M in coeffs.items():
            if name not in self._sizes:
                raise OcpError(f"constraint references undeclared variable '{name}'")
            if M.shape != (k, self._sizes[name]):
                raise OcpError(
                    f"coefficient for '{name}' has shape {M.shape}, expected ({k}, {self._sizes[name]})"
                )

    def add_eq(self, coeffs: dict, rhs, initial_state: bool = False) -> None:
        rhs = np.asarray(rhs, dtype=float).reshape(-1)
        coeffs = {n: sp.csc_matrix(M) if not sp.issparse(M) else M.tocsc() for n, M in coeffs.items()}
        self._check(coeffs, rhs)
        if initial_state:
            self._initial_rows = (self._eq_rows, self._eq_rows + rhs.size)
        self._eq_rows += rhs.size
        self._eq_blocks.append((coeffs, rhs))

    def add_ineq(self, coeffs: dict, rhs) -> None:
        rhs = np.asarray(rhs, dtype=float).reshape(-1)
        coeffs = {n: sp.csc_matrix(M) if not sp.issparse(M) else M.tocsc() for n, M in coeffs.items()}
        self._check(coeffs, rhs)
        self._in_blocks.append((coeffs, rhs))

    def add_quad_cost(self, name: str, M) -> None:
        """Adds ``x_name' M x_name`` to the cost (M symmetric PSD)."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if name in self._quad:
            self._quad[name] = self._quad[name] + M
        else:
            self._quad[name] = M

    def add_lin_cost(self, name: str, qvec) -> None:
        qvec = np.asarray(qvec, dtype=float).reshape(-1)
        if name in self._lin:
            self._lin[name] = self._lin[name] + qvec
        else:
            self._lin[name] = qvec

    def build(self) -> ProblemSpec:
        slices: dict[str, slice] = {}
        off = 0
        for name, size in self._sizes.items():
            slices[name] = slice(off, off + size)
            off += size
        n = off

        def assemble(blocks):
            rows_total = sum(rhs.size for _, rhs in blocks)
            ii, jj, vv = [], [], []
            rhs_all = np.zeros(rows_total)
            r = 0
            for coeffs, rhs in blocks:
                k = rhs.size
                for name, M in coeffs.items():
                    coo = M.tocoo()
                    ii.append(coo.row + r)
                    jj.append(coo.col + slices[name].start)
                    vv.append(coo.data)
                rhs_all[r:r + k] = rhs
                r += k
            if ii:
                A = sp.coo_matrix((np.concatenate(vv),
                                   (np.concatenate(ii), np.concatenate(jj))),
                                  shape=(rows_total, n)).tocsc()
            else:
                A = sp.csc_matrix((rows_total, n))
            return A, rhs_all

        A_eq, b_eq = assemble(self._eq_blocks)
        A_in, b_in = assemble(self._in_blocks)

        ii, jj, vv = [], [], []
        for name, M in self._quad.items():
            sl = slices[name]
            if M.shape != (sl.stop - sl.start, sl.stop - sl.start):
                raise OcpError(f"cost block for '{name}' has wrong shape")
            coo = sp.coo_matrix(2.0 * M)
            ii.append(coo.row + sl.start)
            jj.append(coo.col + sl.start)
            vv.append(coo.data)
        if ii:
            P = sp.coo_matrix((np.concatenate(vv), (np.concatenate(ii), np.concatenate(jj))),
                              shape=(n, n)).tocsc()
        else:
            P = sp.csc_matrix((n, n))
        P = sp.triu(P, format="csc")
        q = np.zeros(n)
        for name, qvec in self._lin.items():
            q[slices[name]] = qvec

        return ProblemSpec(tag=self.tag, var_slices=slices, n_vars=n,
                           A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in,
                           P=P, q=q, initial_rows=self._initial_rows, meta=dict(self.meta))


@dataclass(frozen=True)
class SolverSettings:
    """Solver behavior knobs; ``tol`` gates the reported optimality."""

    tol: float = 1e-8
    max_iter: int = 200


@dataclass(frozen=True)
class SolveResult:
    """Outcome of one solver call.

    ``values`` holds primal values per variable name iff the status is
    ``optimal``; ``kkt_residual`` is the largest normalized KKT residual
    (primal feasibility, stationarity, duality gap) that was re-verified
    against the configured tolerance.
    """

    status: str  # 'optimal' | 'infeasible' | 'numerical-failure'
    values: dict[str, np.ndarray] | None
    objective: float | None
    solve_time: float
    kkt_residual: float | None
    raw_status: str
    tag: str
    meta: dict = field(default_factory=dict)


def _kkt_residual(spec: ProblemSpec, x: np.ndarray, z: np.ndarray) -> float:
    n_eq = spec.A_eq.shape[0]
    z_eq, z_in = z[:n_eq], z[n_eq:]
    r_eq, r_in = spec.residuals(x)
    r_eq /= 1.0 + (np.max(np.abs(spec.b_eq)) if n_eq else 0.0)
    r_in /= 1.0 + (np.max(np.abs(spec.b_in)) if spec.b_in.size else 0.0)
    P_sym = spec.P + sp.triu(spec.P, k=1).T
    grad = P_sym @ x + spec.q + spec.A_eq.T @ z_eq + spec.A_in.T @ z_in
    r_st = float(np.max(np.abs(grad))) / (1.0 + float(np.max(np.abs(spec.q), initial=0.0))
                                          + float(np.max(np.abs(P_sym @ x), initial=0.0)))
    pobj = spec.objective_value(x)
    dobj = -0.5 * float(x @ (P_sym @ x)) - float(spec.b_eq @ z_eq) - float(spec.b_in @ z_in)
    r_gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    return max(r_eq, r_in, r_st, r_gap)


def solve(spec: ProblemSpec, settings: SolverSettings = SolverSettings()) -> SolveResult:
    """Solve a ``ProblemSpec`` with a deterministic interior-point method.

    Reports ``optimal`` only after re-verifying the KKT residuals of the
    returned iterate against ``settings.tol``; a solver breakdown or an
    iterate failing that gate is reported as ``numerical-failure`` rather
    than silently passed through.
    """
    n_eq = spec.A_eq.shape[0]
    n_in = spec.A_in.shape[0]
    A = sp.vstack([spec.A_eq, spec.A_in]).tocsc() if n_in or n_eq else sp.csc_matrix((0, spec.n_vars))
    b = np.concatenate([spec.b_eq, spec.b_in])
    cones = []
    if n_eq:
        cones.append(clarabel.ZeroConeT(n_eq))
    if n_in:
        cones.append(clarabel.NonnegativeConeT(n_in))

    st = clarabel.DefaultSettings()
    st.verbose = False
    st.max_iter = settings.max_iter
    st.max_threads = 1
    inner = max(settings.tol / 10.0, 1e-12)
    st.tol_feas = inner
    st.tol_gap_abs = inner
    st.tol_gap_rel = inner

    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(spec.P, spec.q, A, b, cones, st)
    sol = solver.solve()
    elapsed = time.perf_counter() - t0
    raw = str(sol.status)

    if raw in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return SolveResult(status="infeasible", values=None, objective=None,
                           solve_time=elapsed, kkt_residual=None, raw_status=raw,
                           tag=spec.tag, meta=dict(spec.meta))
    if raw in ("Solved", "AlmostSolved"):
        x = np.asarray(sol.x)
        z = np.asarray(sol.z)
        resid = _kkt_residual(spec, x, z)
        if resid <= settings.tol:
            return SolveResult(status="optimal", values=spec.split(x),
                               objective=float(spec.objective_value(x)),
                               solve_time=elapsed, kkt_residual=resid, raw_status=raw,
                               tag=spec.tag, meta=dict(spec.meta))
        return SolveResult(status="numerical-failure", values=None, objective=None,
                           solve_time=elapsed, kkt_residual=resid, raw_status=raw,
                           tag=spec.tag, meta=dict(spec.meta))
    return SolveResult(status="numerical-failure", values=None, objective=None,
                       solve_time=elapsed, kkt_residual=None, raw_status=raw,
                       tag=spec.tag, meta=dict(spec.meta))


def extract_control(result: SolveResult) -> np.ndarray:
    """First nominal input of an optimal solution (the applied control)."""
    if result.status != "optimal":
        raise OcpError(f"cannot extract control from a result with status '{result.status}'")
    m = result.meta["m"]
    return np.array(result.values["v"][:m])


@dataclass(frozen=True)
class MemoryEntry:
    """One certified tube solution: tubes, terminal scaling, and response.

    ``lam_cert`` is the nonnegative certificate matrix establishing the
    terminal decrease condition for ``(alpha, gamma)``; entries are only
    constructed by code paths that re-verify it.
    """

    tubes: slp.TubeSequence
    alpha: float
    response: slp.SystemResponse
    birth_step: int
    lam_cert: np.ndarray

    def __post_init__(self):
        if self.alpha < 0.0:
            raise OcpError(f"terminal scaling must be nonnegative, got {self.alpha}")


def _phi_x_expressions(data: "ProblemData") -> list:
    """Affine expansion of the eliminated state response blocks.

    Returns for each step ``j`` (1-based) the pair ``(C_j, [M_1..M_{j-1}])``
    with ``Phi_x^j = C_j + sum_l M_l phi_l`` where ``M_l = A^(j-1-l) B``.
    """
    A, B = data.model.A, data.model.B
    N = data.N
    Apow = [np.linalg.matrix_power(A, j) for j in range(N + 1)]
    out = []
    for j in range(1, N + 1):
        out.append((Apow[j - 1], [Apow[j - 1 - l] @ B for l in range(1, j)]))
    return out, Apow


def _gamma_coeffs(data: "ProblemData") -> tuple[np.ndarray, list[np.ndarray]]:
    """Affine expansion ``Gamma = A^N + sum_l (A^(N-l) B) phi_l``."""
    A, B = data.model.A, data.model.B
    N = data.N
    const = np.linalg.matrix_power(A, N)
    mats = [np.linalg.matrix_power(A, N - l) @ B for l in range(1, N + 1)]
    return const, mats


def _add_nominal_dynamics(b: SpecBuilder, data: "ProblemData", x0) -> None:
    n, m, N = data.model.n, data.model.m, data.N
    b.add_eq({"z": sp.hstack([sp.eye(n), sp.csc_matrix((n, N * n))])},
             np.asarray(x0, dtype=float).reshape(n), initial_state=True)
    # z_{i+1} - A z_i - B v_i = 0, stacked over i.
    D = sp.lil_matrix((N * n, (N + 1) * n))
    for i in range(N):
        D[i * n:(i + 1) * n, (i + 1) * n:(i + 2) * n] = np.eye(n)
        D[i * n:(i + 1) * n, i * n:(i + 1) * n] = -data.model.A
    b.add_eq({"z": D.tocsc(), "v": sp.kron(sp.eye(N), -data.model.B)}, np.zeros(N * n))


def _add_nominal_cost(b: SpecBuilder, data: "ProblemData", P_term: np.ndarray,
                      weight: float = 1.0) -> None:
    N = data.N
    n, m = data.model.n, data.model.m
    Zcost = np.zeros(((N + 1) * n, (N + 1) * n))
    for i in range(N):
        Zcost[i * n:(i + 1) * n, i * n:(i + 1) * n] = data.Q
    Zcost[N * n:, N * n:] = P_term
    b.add_quad_cost("z", weight * Zcost)
    b.add_quad_cost("v", weight * np.kron(np.eye(N), data.R))


def build_sltmpc(data: "ProblemData", terminal: "TerminalIngredients", x0,
                 terminal_mode: str = "scaled", cost_mode: str = "nominal",
                 mu: float = 1e-3) -> ProblemSpec:
    """Tube-optimizing problem: nominal trajectory and responses jointly.

    ``terminal_mode='scaled'`` imposes the scaled terminal-set conditions
    with the decrease certificate as a decision matrix; ``'fir'`` instead
    forces the horizon wrap-around map to zero, under which the decrease
    condition holds for any scaling and the certificate is recovered by a
    separate LP when the solution is converted to a memory entry.

    ``cost_mode='nominal'`` is the quadratic trajectory cost;
    ``'tightening'`` minimizes the accumulated constraint tightening with
    the trajectory cost weighted by ``mu``.
    """
    if terminal_mode not in ("scaled", "fir"):
        raise OcpError(f"unknown terminal mode '{terminal_mode}'")
    if cost_mode not in ("nominal", "tightening"):
        raise OcpError(f"unknown cost mode '{cost_mode}'")
    n, m, N = data.model.n, data.model.m, data.N
    n_x, n_u = data.X.n_rows, data.U.n_rows
    Wv = data.W_vertices.points
    n_w = Wv.shape[0]
    Hf, hf = terminal.X_f.H, terminal.X_f.h
    n_f = terminal.n_f
    A_cl = data.model.A + data.model.B @ terminal.K_f

    b = SpecBuilder(f"secondary-{terminal_mode}-{cost_mode}")
    b.meta = {"n": n, "m": m, "N": N, "terminal_mode": terminal_mode, "cost_mode": cost_mode}
    b.add_var("z", (N + 1) * n)
    b.add_var("v", N * m)
    for j in range(1, N + 1):
        b.add_var(f"phi_{j}", m * n)
    for j in range(1, N + 1):
        b.add_var(f"sx_{j}", n_x)
    for j in range(1, N + 1):
        b.add_var(f"su_{j}", n_u)
    b.add_var("alpha", 1)
    if terminal_mode == "scaled":
        b.add_var("Lam", n_f * n_f)

    _add_nominal_dynamics(b, data, x0)

    phi_x_expr, Apow = _phi_x_expressions(data)

    # Tightened state and input constraints along the horizon.
    for i in range(N):
        coeffs = {"z": sp.hstack([sp.csc_matrix((n_x, i * n)), sp.csc_matrix(data.X.H),
                                  sp.csc_matrix((n_x, (N - i) * n))])}
        for j in range(1, i + 1):
            coeffs[f"sx_{j}"] = sp.eye(n_x)
        b.add_ineq(coeffs, data.X.h)
        coeffs = {"v": sp.hstack([sp.csc_matrix((n_u, i * m)), sp.csc_matrix(data.U.H),
                                  sp.csc_matrix((n_u, (N - 1 - i) * m))])}
        for j in range(1, i + 1):
            coeffs[f"su_{j}"] = sp.eye(n_u)
        b.add_ineq(coeffs, data.U.h)

    # Epigraphs of the per-step mapped disturbance supports.
    for j in range(1, N + 1):
        C_j, Ms = phi_x_expr[j - 1]
        for w in Wv:
            coeffs = {f"sx_{j}": -sp.eye(n_x)}
            for l, M in enumerate(Ms, start=1):
                coeffs[f"phi_{l}"] = np.kron(data.X.H @ M, w[None, :])
            b.add_ineq(coeffs, -(data.X.H @ C_j @ w))
        for w in Wv:
            coeffs = {f"su_{j}": -sp.eye(n_u),
                      f"phi_{j}": np.kron(data.U.H, w[None, :])}
            b.add_ineq(coeffs, np.zeros(n_u))

    gamma_const, gamma_mats = _gamma_coeffs(data)

    # Terminal-state membership in the scaled terminal set.
    b.add_ineq({"z": sp.hstack([sp.csc_matrix((n_f, N * n)), sp.csc_matrix(Hf)]),
                "alpha": -hf[:, None]}, np.zeros(n_f))
    # Scaled terminal set inside the tightened state/input sets.
    coeffs = {"alpha": terminal.h_Xf_at_Hx[:, None]}
    for j in range(1, N + 1):
        coeffs[f"sx_{j}"] = sp.eye(n_x)
    b.add_ineq(coeffs, data.X.h)
    coeffs = {"alpha": terminal.h_KXf_at_Hu[:, None]}
    for j in range(1, N + 1):
        coeffs[f"su_{j}"] = sp.eye(n_u)
    b.add_ineq(coeffs, data.U.h)
    b.add_ineq({"alpha": np.array([[-1.0], [1.0]])}, np.array([0.0, ALPHA_CAP]))

    if terminal_mode == "scaled":
        # Decrease condition via its certificate: Lam >= 0,
        # Lam Hf = alpha Hf A_cl, Lam hf + h_W(Gamma' Hf') <= alpha hf.
        b.add_eq({"Lam": sp.kron(sp.eye(n_f), sp.csc_matrix(Hf.T)),
                  "alpha": -(Hf @ A_cl).reshape(-1, 1)}, np.zeros(n_f * n))
        b.add_ineq({"Lam": -sp.eye(n_f * n_f)}, np.zeros(n_f * n_f))
        for w in Wv:
            coeffs = {"Lam": sp.kron(sp.eye(n_f), sp.csc_matrix(hf[None, :])),
                      "alpha": -hf[:, None]}
            for l, M in enumerate(gamma_mats, start=1):
                coeffs[f"phi_{l}"] = np.kron(Hf @ M, w[None, :])
            b.add_ineq(coeffs, -(Hf @ gamma_const @ w))
    else:
        # Zero wrap-around map: Gamma = 0 elementwise.
        coeffs = {f"phi_{l}": sp.kron(sp.csc_matrix(M), sp.eye(n))
                  for l, M in enumerate(gamma_mats, start=1)}
        b.add_eq(coeffs, -gamma_const.reshape(-1))

    if cost_mode == "nominal":
        _add_nominal_cost(b, data, terminal.P)
    else:
        _add_nominal_cost(b, data, terminal.P, weight=mu)
        for j in range(1, N + 1):
            b.add_lin_cost(f"sx_{j}", float(N - j + 1) * np.ones(n_x))
            b.add_lin_cost(f"su_{j}", float(N - j + 1) * np.ones(n_u))
    return b.build()


def build_fixed_tube(data: "ProblemData", terminal: "TerminalIngredients",
                     entry: MemoryEntry, x0) -> ProblemSpec:
    """Baseline problem with tubes and terminal scaling frozen to one entry."""
    n, m, N = data.model.n, data.model.m, data.N
    n_x, n_u = data.X.n_rows, data.U.n_rows
    Hf, hf = terminal.X_f.H, terminal.X_f.h

    b = SpecBuilder("fixed-tube")
    b.meta = {"n": n, "m": m, "N": N}
    b.add_var("z", (N + 1) * n)
    b.add_var("v", N * m)
    _add_nominal_dynamics(b, data, x0)
    for i in range(N):
        b.add_ineq({"z": sp.hstack([sp.csc_matrix((n_x, i * n)), sp.csc_matrix(data.X.H),
                                    sp.csc_matrix((n_x, (N - i) * n))])},
                   data.X.h - entry.tubes.t_x[i])
        b.add_ineq({"v": sp.hstack([sp.csc_matrix((n_u, i * m)), sp.csc_matrix(data.U.H),
                                    sp.csc_matrix((n_u, (N - 1 - i) * m))])},
                   data.U.h - entry.tubes.t_u[i])
    b.add_ineq({"z": sp.hstack([sp.csc_matrix((terminal.n_f, N * n)), sp.csc_matrix(Hf)])},
               entry.alpha * hf)
    _add_nominal_cost(b, data, terminal.P)
    return b.build()


def build_primary(data: "ProblemData", terminal: "TerminalIngredients",
                  entries: list[MemoryEntry], x0, rho: float = 1e-3,
                  step: int = 0) -> ProblemSpec:
    """Tube-fusing problem: nominal trajectory over a convex combination of entries.

    The per-entry tightened sets enter through decomposed trajectories
    ``zeta_j``/``nu_j`` with ``z_i = sum_j zeta_{i,j}``, which encodes the
    weighted Minkowski sums of the tightened constraint sets exactly. The
    fused terminal sets collapse to one scaled terminal set because all
    entries scale the same terminal shape. The regularization
    ``rho * sum_j age_j lam_j`` discourages weight on older entries.
    """
    if not entries:
        raise OcpError("memory must contain at least one entry")
    M = len(entries)
    n, m, N = data.model.n, data.model.m, data.N
    n_x, n_u = data.X.n_rows, data.U.n_rows
    Hf, hf = terminal.X_f.H, terminal.X_f.h

    b = SpecBuilder("primary")
    b.meta = {"n": n, "m": m, "N": N, "M": M}
    b.add_var("z", (N + 1) * n)
    b.add_var("v", N * m)
    b.add_var("lam", M)
    for j in range(M):
        b.add_var(f"zeta_{j}", N * n)
        b.add_var(f"nu_{j}", N * m)

    _add_nominal_dynamics(b, data, x0)

    # Aggregation: z_i = sum_j zeta_{i,j} (i < N), v_i = sum_j nu_{i,j}.
    coeffs = {"z": sp.hstack([sp.eye(N * n), sp.csc_matrix((N * n, n))])}
    for j in range(M):
        coeffs[f"zeta_{j}"] = -sp.eye(N * n)
    b.add_eq(coeffs, np.zeros(N * n))
    coeffs = {"v": sp.eye(N * m)}
    for j in range(M):
        coeffs[f"nu_{j}"] = -sp.eye(N * m)
    b.add_eq(coeffs, np.zeros(N * m))

    # Convex combination weights.
    b.add_eq({"lam": np.ones((1, M))}, np.ones(1))
    b.add_ineq({"lam": -np.eye(M)}, np.zeros(M))

    # Per-entry scaled tightened constraints on the decomposed trajectories.
    for j, e in enumerate(entries):
        hx_stack = np.concatenate([data.X.h - e.tubes.t_x[i] for i in range(N)])
        col = np.zeros((N * n_x, M))
        col[:, j] = -hx_stack
        b.add_ineq({f"zeta_{j}": sp.kron(sp.eye(N), sp.csc_matrix(data.X.H)), "lam": col},
                   np.zeros(N * n_x))
        hu_stack = np.concatenate([data.U.h - e.tubes.t_u[i] for i in range(N)])
        col = np.zeros((N * n_u, M))
        col[:, j] = -hu_stack
        b.add_ineq({f"nu_{j}": sp.kron(sp.eye(N), sp.csc_matrix(data.U.H)), "lam": col},
                   np.zeros(N * n_u))

    # Fused terminal set: sum_j lam_j alpha_j copies of the same shape.
    alphas = np.array([e.alpha for e in entries])
    b.add_ineq({"z": sp.hstack([sp.csc_matrix((terminal.n_f, N * n)), sp.csc_matrix(Hf)]),
                "lam": -np.outer(hf, alphas)}, np.zeros(terminal.n_f))

    _add_nominal_cost(b, data, terminal.P)
    ages = np.array([max(step - e.birth_step, 0) for e in entries], dtype=float)
    b.add_lin_cost("lam", rho * ages)
    return b.build()


def max_terminal_scaling(data: "ProblemData", terminal: "TerminalIngredients",
                         gamma: np.ndarray, t_xN: np.ndarray, t_uN: np.ndarray,
                         settings: SolverSettings = SolverSettings()):
    """Largest certified terminal scaling for fixed tubes and wrap-around map.

    Maximizes ``alpha`` subject to the scaled terminal-set conditions with
    the tubes frozen; returns ``(alpha, Lam)`` with the certificate of the
    decrease condition. Raises ``EntryCertificationError`` when no
    nonnegative scaling works.
    """
    Hf, hf = terminal.X_f.H, terminal.X_f.h
    n_f = terminal.n_f
    A_cl = data.model.A + data.model.B @ terminal.K_f
    Wv = data.W_vertices.points

    b = SpecBuilder("terminal-scaling-lp")
    b.add_var("alpha", 1)
    b.add_var("Lam", n_f * n_f)
    b.add_eq({"Lam": sp.kron(sp.eye(n_f), sp.csc_matrix(Hf.T)),
              "alpha": -(Hf @ A_cl).reshape(-1, 1)}, np.zeros(n_f * Hf.shape[1]))
    b.add_ineq({"Lam": -sp.eye(n_f * n_f)}, np.zeros(n_f * n_f))
    h_wg = np.max(Hf @ gamma @ Wv.T, axis=1)
    b.add_ineq({"Lam": sp.kron(sp.eye(n_f), sp.csc_matrix(hf[None, :])),
                "alpha": -hf[:, None]}, -h_wg)
    b.add_ineq({"alpha": terminal.h_Xf_at_Hx[:, None]}, data.X.h - t_xN)
    b.add_ineq({"alpha": terminal.h_KXf_at_Hu[:, None]}, data.U.h - t_uN)
    b.add_ineq({"alpha": np.array([[-1.0], [1.0]])}, np.array([0.0, ALPHA_CAP]))
    b.add_lin_cost("alpha", np.array([-1.0]))

    res = solve(b.build(), settings)
    if res.status != "optimal":
        raise EntryCertificationError(
            f"no feasible terminal scaling for the given tubes (status {res.status})")
    alpha = float(res.values["alpha"][0])
    Lam = res.values["Lam"].reshape(n_f, n_f)
    return alpha, Lam


def response_from_solution(data: "ProblemData", values: dict[str, np.ndarray]) -> slp.SystemResponse:
    """Rebuild the full response from the optimized input response blocks."""
    n, m, N = data.model.n, data.model.m, data.N
    phi_u = [values[f"phi_{j}"].reshape(m, n) for j in range(1, N + 1)]
    phi_x = [np.eye(n)]
    for j in range(1, N):
        phi_x.append(data.model.A @ phi_x[-1] + data.model.B @ phi_u[j - 1])
    return slp.SystemResponse(phi_x=tuple(phi_x), phi_u=tuple(phi_u))


def memory_entry_from_secondary(data: "ProblemData", terminal: "TerminalIngredients",
                                result: SolveResult, birth_step: int,
                                cert_tol: float = 1e-7,
                                settings: SolverSettings = SolverSettings()) -> MemoryEntry:
    """Convert an optimal tube-optimization result into a certified entry.

    Tightenings are recomputed exactly from the response (the in-problem
    epigraph values only upper-bound them), the terminal scaling is
    re-maximized with the tubes frozen (the cost leaves the scaling free,
    and a larger certified scaling can only enlarge the feasible set of
    the fusing problem), and the terminal-set conditions are re-verified
    from scratch; a failure there means the solver returned an iterate
    outside its advertised tolerance.
    """
    if result.status != "optimal":
        raise OcpError("only optimal secondary results can enter the memory")
    sr = response_from_solution(data, result.values)
    tubes = slp.tube_tightenings(sr, data.model, data.W_vertices, data.X.H, data.U.H)
    alpha, lam_cert = max_terminal_scaling(data, terminal, tubes.gamma,
                                           tubes.t_x[data.N], tubes.t_u[data.N], settings)
    alpha = max(alpha, 0.0)

    ok = check_containment_certificate(lam_cert, alpha, alpha,
                      data.model.A + data.model.B @ terminal.K_f, tubes.gamma,
                      terminal.X_f, terminal.X_f, data.W_vertices, tol=cert_tol)
    ok = ok and np.all(alpha * terminal.h_Xf_at_Hx + tubes.t_x[data.N] <= data.X.h + cert_tol)
    ok = ok and np.all(alpha * terminal.h_KXf_at_Hu + tubes.t_u[data.N] <= data.U.h + cert_tol)
    if not ok:
        raise EntryCertificationError("terminal-set conditions failed re-verification")
    return MemoryEntry(tubes=tubes, alpha=alpha, response=sr,
                       birth_step=birth_step, lam_cert=lam_cert)
