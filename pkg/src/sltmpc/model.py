"""Plant data, cost parameters, and offline terminal ingredients.

Everything here is computed once per experiment: the terminal gain and
cost come from the discrete Riccati fixed point, the terminal set is a
geometric-series outer approximation of the minimal robust positively
invariant set for the resulting closed loop, and the offline disturbance
reachable tubes seed the controller memory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import slp
from .polytope import (
    HPolytope,
    PolytopeError,
    VertexSet,
    contains,
    hrep_from_vertices_2d,
    linear_map,
    minkowski_sum_2d,
)

if TYPE_CHECKING:
    from .ocp import MemoryEntry


class ModelError(ValueError):
    """Inconsistent problem data or failed offline synthesis."""


@dataclass(frozen=True)
class LtiModel:
    """Linear time-invariant plant ``x+ = A x + B u + w``."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ModelError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ModelError(f"B must have {A.shape[0]} rows, got {B.shape}")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


def _check_pd(M: np.ndarray, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or np.max(np.abs(M - M.T)) > 1e-12:
        raise ModelError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ModelError(f"{name} must be positive definite") from None
    return M


@dataclass(frozen=True)
class ProblemData:
    """Plant, constraint sets, cost weights, and horizon for one experiment.

    ``W_vertices`` is the finite generator form of the disturbance set; all
    tube arithmetic and the optimization encodings evaluate the support of
    response-mapped disturbance sets by enumerating these vertices. ``W``
    may be the degenerate set ``{0}`` (no disturbance); the state and
    input constraint sets must contain the origin in their interior.
    """

    model: LtiModel
    X: HPolytope
    U: HPolytope
    W: HPolytope
    W_vertices: VertexSet
    Q: np.ndarray
    R: np.ndarray
    N: int

    def __post_init__(self):
        if not (self.X.constraint_set and self.U.constraint_set):
            raise ModelError("X and U must be constraint sets (origin in interior)")
        if self.X.dim != self.model.n or self.U.dim != self.model.m:
            raise ModelError("constraint set dimensions do not match the model")
        if self.W.dim != self.model.n or self.W_vertices.dim != self.model.n:
            raise ModelError("disturbance set dimension does not match the model")
        if np.any(self.W.h < 0.0):
            raise ModelError("W must contain the origin")
        Q = _check_pd(self.Q, "Q")
        R = _check_pd(self.R, "R")
        if Q.shape[0] != self.model.n or R.shape[0] != self.model.m:
            raise ModelError("cost weight dimensions do not match the model")
        if int(self.N) < 2:
            raise ModelError(f"horizon must be at least 2, got {self.N}")
        Q.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "N", int(self.N))


@dataclass(frozen=True)
class TerminalIngredients:
    """Terminal gain, cost, and invariant set with precomputed supports.

    ``h_Xf_at_Hx[r]`` is the support of the terminal set along the r-th
    state constraint normal and ``h_KXf_at_Hu[r]`` the support of the
    gain-mapped terminal set along the r-th input constraint normal; both
    appear as constants in the scaled terminal-set conditions.
    """

    K_f: np.ndarray
    P: np.ndarray
    X_f: HPolytope
    X_f_vertices: VertexSet
    h_Xf_at_Hx: np.ndarray
    h_KXf_at_Hu: np.ndarray

    @property
    def n_f(self) -> int:
        return self.X_f.n_rows


def step_dynamics(model: LtiModel, x, u, w) -> np.ndarray:
    """One step of the disturbed plant: ``A x + B u + w``."""
    x = np.asarray(x, dtype=float).reshape(model.n)
    u = np.asarray(u, dtype=float).reshape(model.m)
    w = np.asarray(w, dtype=float).reshape(model.n)
    return model.A @ x + model.B @ u + w


def lqr_terminal(data: ProblemData, max_iter: int = 100_000, tol: float = 1e-13):
    """Terminal gain and cost from the discrete Riccati fixed point.

    Iterates the Riccati recursion to convergence and returns ``(K_f, P)``
    with the sign convention ``u = K_f x``. The pair satisfies the
    terminal Lyapunov inequality with equality, up to the fixed-point
    residual.
    """
    A, B, Q, R = data.model.A, data.model.B, data.Q, data.R
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        G = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ A - (A.T @ BtP.T) @ G
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > 1e14:
            raise ModelError("Riccati iteration diverged: (A, B) not stabilizable")
        if np.max(np.abs(P_next - P)) < tol:
            P = P_next
            break
        P = P_next
    else:
        raise ModelError(f"Riccati iteration did not converge in {max_iter} iterations")
    K_f = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rho = np.max(np.abs(np.linalg.eigvals(A + B @ K_f)))
    if rho >= 1.0:
        raise ModelError(f"(A, B) not stabilizable: closed-loop spectral radius {rho:.6f}")
    return K_f, P


def verify_lyapunov(model: LtiModel, P, K_f, Q, R, tol: float = 1e-8) -> bool:
    """Terminal Lyapunov decrease check.

    True iff ``(A+BK)^T P (A+BK) - P + Q + K^T R K`` is negative
    semidefinite within ``tol`` (largest eigenvalue at most ``tol``).
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    K_f = np.atleast_2d(np.asarray(K_f, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    A_cl = model.A + model.B @ K_f
    M = A_cl.T @ P @ A_cl - P + Q + K_f.T @ R @ K_f
    return bool(np.max(np.linalg.eigvalsh(0.5 * (M + M.T))) <= tol)


def mrpi_set(A_cl: np.ndarray, W: HPolytope, W_vertices: VertexSet, eps: float = 1e-9,
             contraction: float = 0.1, step_cap: int = 200) -> HPolytope:
    """Invariant outer approximation of the minimal RPI set for ``x+ = A_cl x + w``.

    Finds the smallest ``s`` with ``A_cl^s W`` contained in
    ``contraction * W``, then inflates the s-step reachable set by the
    exact contraction factor attained at that ``s`` (never larger than
    ``contraction``), which keeps the approximation invariant and makes a
    nilpotent loop return the reachable set itself without inflation. The
    result is certified by a vertex-wise invariance check within ``eps``.
    """
    A_cl = np.atleast_2d(np.asarray(A_cl, dtype=float))
    if A_cl.shape[0] != 2:
        raise ModelError("invariant set construction implemented for 2-state systems only")
    if not 0.0 < contraction < 1.0:
        raise ModelError(f"contraction must lie in (0, 1), got {contraction}")
    rho = np.max(np.abs(np.linalg.eigvals(A_cl)))
    if rho >= 1.0:
        raise ModelError(f"closed loop must be stable, spectral radius {rho:.6f} >= 1")
    Wv = W_vertices.points
    radius = float(np.max(np.abs(Wv)))
    if radius < 1e-14:
        # Degenerate no-disturbance case: the minimal invariant set is {0}.
        p = A_cl.shape[0]
        return HPolytope(np.vstack([np.eye(p), -np.eye(p)]), np.zeros(2 * p))

    s = None
    factor = None
    for k in range(1, step_cap + 1):
        mapped = Wv @ np.linalg.matrix_power(A_cl, k).T
        ratios = (mapped @ W.H.T) / W.h[None, :]
        worst = float(np.max(ratios))
        if worst <= contraction:
            s, factor = k, max(worst, 0.0)
            break
    if s is None:
        raise ModelError(
            f"no s <= {step_cap} with A_cl^s W inside {contraction} W; increase the contraction"
        )

    reach = VertexSet(Wv)
    for j in range(1, s):
        reach = minkowski_sum_2d(reach, linear_map(np.linalg.matrix_power(A_cl, j), W_vertices))
    verts = reach.points / (1.0 - factor)
    X_f = hrep_from_vertices_2d(VertexSet(verts))

    for v in verts:
        for w in Wv:
            if not contains(X_f, A_cl @ v + w, eps):
                raise ModelError("invariance certification of the terminal set failed")
    return X_f


def terminal_ingredients(data: ProblemData, contraction: float = 0.1, eps: float = 1e-9,
                         step_cap: int = 200) -> TerminalIngredients:
    """Offline terminal synthesis: gain and cost, invariant set, supports."""
    from .polytope import vertices_2d

    K_f, P = lqr_terminal(data)
    A_cl = data.model.A + data.model.B @ K_f
    X_f = mrpi_set(A_cl, data.W, data.W_vertices, eps=eps,
                   contraction=contraction, step_cap=step_cap)
    try:
        Xf_v = vertices_2d(X_f)
    except PolytopeError:
        # Degenerate {0} terminal set (no disturbance).
        Xf_v = VertexSet(np.zeros((1, data.model.n)))
    h_Xf_at_Hx = np.max(Xf_v.points @ data.X.H.T, axis=0)
    h_KXf_at_Hu = np.max(Xf_v.points @ K_f.T @ data.U.H.T, axis=0)
    return TerminalIngredients(K_f=K_f, P=P, X_f=X_f, X_f_vertices=Xf_v,
                               h_Xf_at_Hx=h_Xf_at_Hx, h_KXf_at_Hu=h_KXf_at_Hu)


def drs_response(model: LtiModel, K: np.ndarray, N: int) -> slp.SystemResponse:
    """Fixed response of the static tube controller ``u^e = K x^e``.

    ``phi_x[j-1] = (A+BK)^(j-1)`` and ``phi_u[j-1] = K (A+BK)^(j-1)``; the
    resulting tubes are the classical disturbance reachable sets of the
    closed loop (open-loop reachable sets for ``K = 0``).
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    A_cl = model.A + model.B @ K
    phi_x, phi_u = [], []
    blk = np.eye(model.n)
    for _ in range(N):
        phi_x.append(blk)
        phi_u.append(K @ blk)
        blk = A_cl @ blk
    return slp.SystemResponse(phi_x=tuple(phi_x), phi_u=tuple(phi_u))


def drs_tightenings(data: ProblemData, terminal: TerminalIngredients,
                    K: np.ndarray | None = None) -> "MemoryEntry":
    """Offline memory entry from fixed disturbance-reachable tubes.

    Uses the terminal gain by default (closed-loop reachable sets); the
    terminal scaling is maximized over the scaled terminal-set conditions
    with the response fixed, so the entry gets the most permissive
    terminal set it can certify.
    """
    from .ocp import MemoryEntry, max_terminal_scaling

    if K is None:
        K = terminal.K_f
    sr = drs_response(data.model, K, data.N)
    tubes = slp.tube_tightenings(sr, data.model, data.W_vertices, data.X.H, data.U.H)
    alpha, lam_cert = max_terminal_scaling(data, terminal, tubes.gamma,
                                           tubes.t_x[data.N], tubes.t_u[data.N])
    return MemoryEntry(tubes=tubes, alpha=alpha, response=sr,
                       birth_step=0, lam_cert=lam_cert)
