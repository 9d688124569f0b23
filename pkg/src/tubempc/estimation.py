"""Set-membership estimation of the model parameter.

Each derivative measurement defines a non-falsified parameter set

    Delta = { theta : residual - G(x,u) theta  in  E(x) D (+) D_eps },

a polyhedron obtained by pushing the residual through the H-representation of
the Minkowski sum on the right. The parameter polytope is updated by
intersection; a fixed-complexity variant updates only the offset vector of a
fixed row matrix via support-function LPs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import EstimationInconsistent
from .model import UncertainSystem
from .polytopes import Polytope, hrep_from_points, minkowski_sum_points

Array = np.ndarray


@dataclass(frozen=True)
class Measurement:
    """State, input and noisy state-derivative sample at one time instant."""

    t: float
    x: Array
    u: Array
    xdot_tilde: Array

    def __post_init__(self):
        for name in ("x", "u", "xdot_tilde"):
            arr = np.asarray(getattr(self, name), float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, arr)


def nonfalsified_set(sys: UncertainSystem, meas: Measurement,
                     tol: float = 1e-9) -> Polytope:
    """Parameters consistent with one measurement (may be unbounded).

    The set E(x) D (+) D_eps is hulled from summand vertices; degenerate
    (lower-dimensional) sums become equality row pairs, so directions with no
    parameter information either pass (consistent residual) or make the set
    empty, falsifying the model.
    """
    r = meas.xdot_tilde - sys.f(meas.x) - sys.B(meas.x) @ meas.u
    Gxu = sys.G(meas.x, meas.u)
    Ex = sys.E(meas.x)
    d_verts = sys.D.vertices()
    e_verts = sys.D_eps.vertices()
    pts = minkowski_sum_points(d_verts @ Ex.T, e_verts)
    W = hrep_from_points(pts, tol=tol)
    # { theta : H_w (r - G theta) <= h_w }
    A = -W.A @ Gxu
    b = W.b - W.A @ r
    # rows with (numerically) zero theta-coefficients are pure consistency checks
    keep, violated = [], False
    scale = max(1.0, float(np.max(np.abs(W.A))))
    for i in range(A.shape[0]):
        if np.max(np.abs(A[i])) <= 1e-12 * scale:
            if b[i] < -tol:
                violated = True
        else:
            keep.append(i)
    if violated:
        raise EstimationInconsistent(
            "measurement residual outside disturbance/noise support")
    if not keep:
        # no parameter information at all: Delta = R^p
        return Polytope(np.zeros((1, sys.p)), np.array([0.0]))
    return Polytope(A[keep], b[keep])


def update_parameter_set(theta_prev: Polytope, deltas: list[Polytope],
                         tol: float = 1e-9) -> Polytope:
    """Exact polytopic intersection with redundancy removal."""
    out = theta_prev.intersect(*deltas)
    if out.is_empty(tol):
        raise EstimationInconsistent("parameter set intersection is empty")
    return out.remove_redundant()


def fixed_complexity_update(H: Array, h_prev: Array,
                            deltas: list[Polytope]) -> Array:
    """Tightest offsets h_new with {H theta <= h_new} containing the exact
    intersection {H theta <= h_prev} cap (cap_i Delta_i), one LP per row."""
    H = np.atleast_2d(np.asarray(H, float))
    h_prev = np.atleast_1d(np.asarray(h_prev, float))
    A = np.vstack([H] + [d.A for d in deltas])
    b = np.concatenate([h_prev] + [d.b for d in deltas])
    h_new = np.empty_like(h_prev)
    for i in range(H.shape[0]):
        res = linprog(-H[i], A_ub=A, b_ub=b,
                      bounds=[(None, None)] * H.shape[1], method="highs")
        if res.status == 2:
            raise EstimationInconsistent("fixed-complexity update infeasible")
        if res.status != 0:
            raise RuntimeError(f"support LP failed with status {res.status}")
        h_new[i] = -res.fun
    return np.minimum(h_new, h_prev)


def vertices(P: Polytope) -> Array:
    """Vertex enumeration (dim <= 3), re-exported from the polytope layer."""
    return P.vertices()


def remove_redundant(P: Polytope) -> Polytope:
    """Minimal H-representation, re-exported from the polytope layer."""
    return P.remove_redundant()
