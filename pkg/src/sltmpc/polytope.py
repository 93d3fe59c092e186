"""Halfspace/vertex polytope representations and set-algebra primitives.

Constraint tightening in the controller is done entirely through support
functions evaluated along fixed constraint normals, so the two
representations used here are deliberately minimal: an H-rep
``{x | H x <= h}`` for constraint sets and a finite vertex list for the
sets that appear inside support functions (disturbance set, terminal set).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import linprog

DEFAULT_TOL = 1e-7


class PolytopeError(ValueError):
    """Invalid polytope data or unsupported geometric operation."""


def _as_matrix(M) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise PolytopeError(f"expected a matrix, got array of ndim {M.ndim}")
    return M


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    return v


@dataclass(frozen=True)
class HPolytope:
    """Convex polytope ``{x in R^p | H x <= h}``.

    Parameters
    ----------
    H : (n_c, p) array
        Constraint normals; every row must be nonzero.
    h : (n_c,) array
        Constraint offsets.
    constraint_set : bool
        Flag for sets that must be compact with the origin in their
        interior (state/input/disturbance constraint sets). Requires
        ``h > 0`` componentwise.
    """

    H: np.ndarray
    h: np.ndarray
    constraint_set: bool = False

    def __post_init__(self):
        H = _as_matrix(self.H)
        h = _as_vector(self.h)
        if H.shape[0] != h.shape[0]:
            raise PolytopeError(f"H has {H.shape[0]} rows but h has {h.shape[0]} entries")
        if H.shape[0] < H.shape[1] + 1:
            raise PolytopeError(
                f"need at least p+1={H.shape[1] + 1} halfspaces for a compact set, got {H.shape[0]}"
            )
        row_norms = np.linalg.norm(H, axis=1)
        if np.any(row_norms == 0.0):
            raise PolytopeError("H contains a zero row")
        if self.constraint_set and np.any(h <= 0.0):
            raise PolytopeError("constraint sets must contain the origin in their interior (h > 0)")
        H.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]

    @cached_property
    def is_empty(self) -> bool:
        """Emptiness flag, decided by one feasibility LP.

        Tightening can legitimately produce empty sets, so emptiness is a
        queryable state rather than a construction error.
        """
        res = linprog(np.zeros(self.dim), A_ub=self.H, b_ub=self.h,
                      bounds=[(None, None)] * self.dim, method="highs")
        return res.status == 2


@dataclass(frozen=True)
class VertexSet:
    """Finite generator representation ``conv(points)`` of a compact polytope."""

    points: np.ndarray

    def __post_init__(self):
        pts = _as_matrix(self.points)
        if pts.shape[0] == 0:
            raise PolytopeError("vertex set must be non-empty")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


def box(lower, upper, constraint_set: bool = True) -> HPolytope:
    """Axis-aligned box ``lower <= x <= upper`` in H-rep."""
    lower = _as_vector(lower)
    upper = _as_vector(upper)
    if lower.shape != upper.shape:
        raise PolytopeError("box bounds must have equal length")
    if np.any(lower > upper):
        raise PolytopeError("box has lower > upper")
    p = lower.size
    H = np.vstack([np.eye(p), -np.eye(p)])
    h = np.concatenate([upper, -lower])
    return HPolytope(H, h, constraint_set=constraint_set)


def box_vertices(lower, upper) -> VertexSet:
    """All corner points of a box, in a fixed (binary counter) order."""
    lower = _as_vector(lower)
    upper = _as_vector(upper)
    p = lower.size
    pts = np.empty((2**p, p))
    for k in range(2**p):
        for i in range(p):
            pts[k, i] = upper[i] if (k >> i) & 1 else lower[i]
    return VertexSet(pts)


def support(V: VertexSet, eta) -> float:
    """Support function ``h_V(eta) = max_v eta^T v`` over the vertex set.

    Exact for polytopes: the supremum of a linear function over a compact
    polytope is attained at a vertex.
    """
    eta = _as_vector(eta)
    if not np.all(np.isfinite(eta)):
        raise PolytopeError("direction must be finite")
    if eta.size != V.dim:
        raise PolytopeError(f"direction has dim {eta.size}, vertex set has dim {V.dim}")
    return float(np.max(V.points @ eta))


def mapped_support(M, V: VertexSet, eta) -> float:
    """Support of the linearly mapped set: ``h_{M V}(eta) = h_V(M^T eta)``."""
    M = _as_matrix(M)
    eta = _as_vector(eta)
    if M.shape[1] != V.dim:
        raise PolytopeError(f"map has {M.shape[1]} columns, vertex set has dim {V.dim}")
    if M.shape[0] != eta.size:
        raise PolytopeError(f"map has {M.shape[0]} rows, direction has dim {eta.size}")
    return float(np.max(V.points @ (M.T @ eta)))


def pontryagin_tighten(P: HPolytope, V_S: VertexSet) -> HPolytope:
    """Pontryagin difference ``P (-) conv(V_S)`` as an offset tightening.

    Exact for polytopes: the r-th offset shrinks by the support of the
    subtracted set along the r-th constraint normal. The result may be
    empty; query ``is_empty`` on the returned polytope.
    """
    if V_S.dim != P.dim:
        raise PolytopeError("dimension mismatch between polytope and vertex set")
    tight = np.max(V_S.points @ P.H.T, axis=0)
    return HPolytope(P.H, P.h - tight, constraint_set=False)


def scale(P: HPolytope, alpha: float) -> HPolytope:
    """Scaled polytope ``alpha P = {x | H x <= alpha h}``.

    Valid set scaling for polytopes with the origin in their interior;
    ``alpha = 0`` collapses such a set to ``{0}``.
    """
    if alpha < 0.0:
        raise PolytopeError(f"scaling factor must be nonnegative, got {alpha}")
    return HPolytope(P.H, float(alpha) * P.h, constraint_set=False)


def contains(P: HPolytope, x, tol: float = DEFAULT_TOL) -> bool:
    """Membership test ``H x <= h + tol`` componentwise."""
    x = _as_vector(x)
    if x.size != P.dim:
        raise PolytopeError(f"point has dim {x.size}, polytope has dim {P.dim}")
    if tol < 0.0:
        raise PolytopeError("tol must be nonnegative")
    return bool(np.all(P.H @ x <= P.h + tol))


def _ccw_order(pts: np.ndarray) -> np.ndarray:
    c = np.mean(pts, axis=0)
    ang = np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0])
    return pts[np.argsort(ang)]


def vertices_2d(P: HPolytope, tol: float = 1e-9) -> VertexSet:
    """Vertex enumeration for 2-D polytopes, counterclockwise ordered.

    Intersects all halfspace pairs and keeps feasible intersection points,
    which drops redundant halfspaces implicitly. Raises on empty or
    unbounded input. Only needed for plotting and test oracles, hence the
    2-D restriction.
    """
    if P.dim != 2:
        raise PolytopeError(f"vertex enumeration implemented for p=2 only, got p={P.dim}")
    H, h = P.H, P.h
    # Boundedness: the outward normals must positively span R^2, i.e. no
    # angular gap of pi or more between consecutive normals.
    ang = np.sort(np.arctan2(H[:, 1], H[:, 0]))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
    if np.max(gaps) >= np.pi - 1e-12:
        raise PolytopeError("polytope is unbounded")
    scale_ref = max(1.0, float(np.max(np.abs(h))))
    cand = []
    n_c = H.shape[0]
    for i in range(n_c):
        for j in range(i + 1, n_c):
            A2 = H[[i, j]]
            det = A2[0, 0] * A2[1, 1] - A2[0, 1] * A2[1, 0]
            if abs(det) < 1e-12 * np.linalg.norm(A2[0]) * np.linalg.norm(A2[1]):
                continue
            x = np.linalg.solve(A2, h[[i, j]])
            if np.all(H @ x <= h + tol * scale_ref):
                cand.append(x)
    if not cand:
        raise PolytopeError("polytope is empty")
    pts = np.array(cand)
    # Dedupe near-identical intersection points.
    keep = []
    for x in pts:
        if not any(np.linalg.norm(x - y) <= 10 * tol * scale_ref for y in keep):
            keep.append(x)
    pts = np.array(keep)
    if pts.shape[0] == 1:
        return VertexSet(pts)
    return VertexSet(_ccw_order(pts))


def hrep_from_vertices_2d(V: VertexSet) -> HPolytope:
    """Exact H-rep of a 2-D polygon from its CCW-ordered vertex list."""
    if V.dim != 2:
        raise PolytopeError("H-rep recovery implemented for p=2 only")
    pts = _ccw_order(np.asarray(V.points))
    n = pts.shape[0]
    if n < 3:
        raise PolytopeError("need at least 3 vertices for a full-dimensional polygon")
    rows, offs = [], []
    for i in range(n):
        p, q = pts[i], pts[(i + 1) % n]
        e = q - p
        nrm = np.array([e[1], -e[0]])  # outward normal for CCW ordering
        ln = np.linalg.norm(nrm)
        if ln < 1e-14:
            continue
        rows.append(nrm / ln)
        offs.append(float(nrm @ p) / ln)
    return HPolytope(np.array(rows), np.array(offs))


def convex_hull_2d(points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Convex hull of a 2-D point cloud (monotone chain), CCW without repeats."""
    pts = np.asarray(points, dtype=float)
    scale_ref = max(1.0, float(np.max(np.abs(pts))))
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    dedup = [pts[0]]
    for p in pts[1:]:
        if np.linalg.norm(p - dedup[-1]) > tol * scale_ref:
            dedup.append(p)
    pts = np.array(dedup)
    if pts.shape[0] <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    eps = tol * scale_ref * scale_ref
    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= eps:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= eps:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def minkowski_sum_2d(V1: VertexSet, V2: VertexSet) -> VertexSet:
    """Vertex representation of the Minkowski sum of two 2-D polytopes."""
    if V1.dim != 2 or V2.dim != 2:
        raise PolytopeError("Minkowski sum implemented for p=2 only")
    pts = (V1.points[:, None, :] + V2.points[None, :, :]).reshape(-1, 2)
    return VertexSet(convex_hull_2d(pts))


def linear_map(M, V: VertexSet) -> VertexSet:
    """Image ``{M v | v in conv(V)}`` as a vertex set (hull not pruned)."""
    M = _as_matrix(M)
    if M.shape[1] != V.dim:
        raise PolytopeError("map/vertex dimension mismatch")
    return VertexSet(V.points @ M.T)


def check_containment_certificate(Lambda, alpha: float, beta: float, A, Gamma,
                 X: HPolytope, Y: HPolytope, V_Z: VertexSet,
                 tol: float = DEFAULT_TOL) -> bool:
    """Certificate check for the containment ``alpha A X <= beta Y (-) Gamma Z``.

    Verifies the sufficient conditions: ``Lambda >= 0``,
    ``Lambda H_x = alpha H_y A`` and
    ``Lambda h_x <= beta h_y - h_Z(Gamma^T H_y^T)``, all within ``tol``.
    A passing check certifies the set containment exactly (the conditions
    are the stacked LP-duality certificates of the row-wise support
    inequalities).
    """
    Lambda = _as_matrix(Lambda)
    A = _as_matrix(A)
    Gamma = _as_matrix(Gamma)
    n_y, n_x = Y.n_rows, X.n_rows
    if Lambda.shape != (n_y, n_x):
        raise PolytopeError(f"Lambda must be {n_y}x{n_x}, got {Lambda.shape}")
    if A.shape[1] != X.dim or Gamma.shape[1] != V_Z.dim:
        raise PolytopeError("map dimension mismatch")
    if np.min(Lambda) < -tol:
        return False
    if np.max(np.abs(Lambda @ X.H - alpha * (Y.H @ A))) > tol:
        return False
    h_z = np.max(V_Z.points @ (Gamma.T @ Y.H.T), axis=0)
    return bool(np.all(Lambda @ X.h <= beta * Y.h - h_z + tol))
