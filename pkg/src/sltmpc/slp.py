"""System level responses and the disturbance-reachable tube arithmetic.

A closed error loop is represented by the block diagonals of its Toeplitz
response maps: ``phi_x[j-1]`` maps a disturbance to the state error j steps
later, ``phi_u[j-1]`` to the input correction. Storing one block per
diagonal encodes the time-invariant structure by construction; the affine
realizability constraint then reduces to the recursion checked by
``validate_response``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .polytope import VertexSet

if TYPE_CHECKING:
    from .model import LtiModel

RESPONSE_TOL = 1e-8


@dataclass(frozen=True)
class SystemResponse:
    """Toeplitz block sequences of an error closed loop over an N-step horizon.

    ``phi_x``: N state-response blocks (n x n), ``phi_u``: N input-response
    blocks (m x n). The first state block must be the identity and the
    blocks must satisfy ``phi_x[i+1] = A phi_x[i] + B phi_u[i]`` for the
    plant they belong to; use ``validate_response`` to check.
    """

    phi_x: tuple[np.ndarray, ...]
    phi_u: tuple[np.ndarray, ...]

    def __post_init__(self):
        px = tuple(np.asarray(b, dtype=float) for b in self.phi_x)
        pu = tuple(np.asarray(b, dtype=float) for b in self.phi_u)
        if len(px) != len(pu) or len(px) == 0:
            raise ValueError("phi_x and phi_u must be non-empty and equally long")
        n = px[0].shape[0]
        m = pu[0].shape[0]
        for b in px:
            if b.shape != (n, n):
                raise ValueError("inconsistent state response block shapes")
            b.setflags(write=False)
        for b in pu:
            if b.shape != (m, n):
                raise ValueError("inconsistent input response block shapes")
            b.setflags(write=False)
        object.__setattr__(self, "phi_x", px)
        object.__setattr__(self, "phi_u", pu)

    @property
    def horizon(self) -> int:
        return len(self.phi_x)


@dataclass(frozen=True)
class TubeSequence:
    """Per-step constraint tightenings derived from a system response.

    ``t_x[i]`` holds the support of the i-step state tube along each state
    constraint normal (and analogously ``t_u[i]`` for inputs); row 0 is
    zero because the 0-step tube is ``{0}``. ``gamma`` is the horizon
    wrap-around map ``A phi_x[N-1] + B phi_u[N-1]`` used by the terminal
    conditions.
    """

    t_x: np.ndarray
    t_u: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        t_x = np.asarray(self.t_x, dtype=float)
        t_u = np.asarray(self.t_u, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        if t_x.ndim != 2 or t_u.ndim != 2 or t_x.shape[0] != t_u.shape[0]:
            raise ValueError("t_x and t_u must be (N+1, n_rows) arrays with equal step count")
        if np.any(t_x[0] != 0.0) or np.any(t_u[0] != 0.0):
            raise ValueError("zero-step tightenings must be exactly zero")
        if np.any(np.diff(t_x, axis=0) < -1e-12) or np.any(np.diff(t_u, axis=0) < -1e-12):
            raise ValueError("tightenings must be componentwise monotone")
        for a in (t_x, t_u, gamma):
            a.setflags(write=False)
        object.__setattr__(self, "t_x", t_x)
        object.__setattr__(self, "t_u", t_u)
        object.__setattr__(self, "gamma", gamma)

    @property
    def horizon(self) -> int:
        return self.t_x.shape[0] - 1


def validate_response(sr: SystemResponse, model: "LtiModel", tol: float = RESPONSE_TOL) -> bool:
    """True iff the blocks satisfy the realizability recursion for ``model``.

    Checks ``phi_x[0] = I`` and ``phi_x[i+1] = A phi_x[i] + B phi_u[i]``
    within ``tol``; under the Toeplitz storage this is equivalent to the
    full affine realizability constraint on the stacked response maps.
    """
    n = model.A.shape[0]
    if sr.phi_x[0].shape != (n, n):
        return False
    if np.max(np.abs(sr.phi_x[0] - np.eye(n))) > tol:
        return False
    for i in range(sr.horizon - 1):
        resid = sr.phi_x[i + 1] - (model.A @ sr.phi_x[i] + model.B @ sr.phi_u[i])
        if np.max(np.abs(resid)) > tol:
            return False
    return True


def gamma_of(sr: SystemResponse, model: "LtiModel") -> np.ndarray:
    """Horizon wrap-around map ``A phi_x[N-1] + B phi_u[N-1]``."""
    return model.A @ sr.phi_x[-1] + model.B @ sr.phi_u[-1]


def tube_tightenings(sr: SystemResponse, model: "LtiModel", W_vertices: VertexSet,
                     H_x: np.ndarray, H_u: np.ndarray) -> TubeSequence:
    """Support-function tightenings of the disturbance reachable tubes.

    The i-step tube is the Minkowski sum of the first i response-mapped
    disturbance sets, so its support along a fixed normal is the sum of
    the per-step mapped supports:
    ``t_x[i][r] = sum_{j<=i} max_v H_x[r] phi_x[j] w_v``.
    """
    N = sr.horizon
    Wv = W_vertices.points
    t_x = np.zeros((N + 1, H_x.shape[0]))
    t_u = np.zeros((N + 1, H_u.shape[0]))
    for j in range(1, N + 1):
        t_x[j] = t_x[j - 1] + np.max(H_x @ sr.phi_x[j - 1] @ Wv.T, axis=1)
        t_u[j] = t_u[j - 1] + np.max(H_u @ sr.phi_u[j - 1] @ Wv.T, axis=1)
    return TubeSequence(t_x=t_x, t_u=t_u, gamma=gamma_of(sr, model))


def blend_responses(responses: list[SystemResponse], weights) -> SystemResponse:
    """Convex combination of responses (blockwise); preserves realizability."""
    weights = np.asarray(weights, dtype=float)
    N = responses[0].horizon
    phi_x = [sum(w * sr.phi_x[j] for w, sr in zip(weights, responses)) for j in range(N)]
    phi_u = [sum(w * sr.phi_u[j] for w, sr in zip(weights, responses)) for j in range(N)]
    return SystemResponse(phi_x=tuple(phi_x), phi_u=tuple(phi_u))
