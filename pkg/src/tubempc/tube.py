"""Homothetic tube machinery: scaling dynamics, joint nominal/tube
integration, tightened constraints and the rigid special case.

The scaling obeys

    ddelta = -(rho_c - L_D) delta
             + max_{i,j} [ sum_k L_G,k |[th_i - th_bar]_k| delta
                           + || G(z,v)(th_i - th_bar) + E(z) d_j ||_M(z) ],

maximized over the vertices of the parameter set and the disturbance set.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ccm import CCM, TubeConstants, eval_metric_sqrt, SampleSpec
from .errors import IntegrationError, RigidTubeInfeasible
from .model import UncertainSystem, eval_nominal
from .polytopes import Polytope

log = logging.getLogger(__name__)

Array = np.ndarray


@dataclass(frozen=True)
class TubeState:
    """Nominal state plus tube scaling."""

    z: Array
    delta: float

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, float))
        if self.delta < 0:
            raise ValueError("tube scaling must be nonnegative")


def mismatch_norm(ccm: CCM, sys: UncertainSystem, z, v, dtheta, d,
                  conservative: bool = False) -> float:
    """|| G(z,v) dtheta + E(z) d ||_{M(z)} (or M_upper in conservative mode)."""
    w = sys.G(z, v) @ np.atleast_1d(dtheta) + sys.E(z) @ np.atleast_1d(d)
    if conservative:
        R = np.linalg.cholesky(ccm.M_upper).T
    else:
        R = eval_metric_sqrt(ccm, z)
    return float(np.linalg.norm(R @ w))


def w_bar_requirement(consts: TubeConstants, ccm: CCM, sys: UncertainSystem,
                      delta: float, z, v, theta_i, d_j, theta_bar,
                      conservative: bool = False) -> float:
    """Right-hand side of the auxiliary-variable inequality for one vertex pair."""
    dtheta = np.atleast_1d(theta_i) - np.atleast_1d(theta_bar)
    growth = float(consts.L_G @ np.abs(dtheta)) * delta
    return growth + mismatch_norm(ccm, sys, z, v, dtheta, d_j, conservative)


def f_delta(consts: TubeConstants, ccm: CCM, sys: UncertainSystem,
            delta: float, z, v, Theta: Polytope, theta_bar,
            conservative: bool = False) -> float:
    """Tube scaling derivative: worst vertex pair of the mismatch bound."""
    th_verts = Theta.vertices()
    d_verts = sys.D.vertices()
    if th_verts.shape[0] == 0 or d_verts.shape[0] == 0:
        raise ValueError("empty vertex set in tube dynamics")
    worst = max(
        w_bar_requirement(consts, ccm, sys, delta, z, v, th, dv, theta_bar,
                          conservative)
        for th in th_verts for dv in d_verts
    )
    return -(consts.rho_c - consts.L_D) * delta + worst


def rk4_step(fun, y: Array, h: float) -> Array:
    k1 = fun(y)
    k2 = fun(y + 0.5 * h * k1)
    k3 = fun(y + 0.5 * h * k2)
    k4 = fun(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_tube(sys: UncertainSystem, ccm: CCM, consts: TubeConstants,
                   z0, delta0: float, v_profile, theta_bar, Theta: Polytope,
                   t_grid, substeps: int = 4,
                   conservative: bool = False) -> list[TubeState]:
    """Joint RK4 integration of the nominal state and the tube scaling.

    v_profile(t) must be piecewise constant on each [t_k, t_k+1) interval;
    it is sampled at interval starts. Negative delta from roundoff is clamped
    to zero with a warning.
    """
    z = np.asarray(z0, float).copy()
    delta = float(delta0)
    out = [TubeState(z=z.copy(), delta=delta)]
    t_grid = np.asarray(t_grid, float)
    for k in range(len(t_grid) - 1):
        t0, t1 = t_grid[k], t_grid[k + 1]
        v = np.atleast_1d(np.asarray(v_profile(t0), float))
        h = (t1 - t0) / substeps
        for _ in range(substeps):
            y = np.concatenate([z, [delta]])

            def ode(yv):
                zz, dd = yv[:-1], yv[-1]
                dz = eval_nominal(sys, zz, v, theta_bar)
                ddelta = f_delta(consts, ccm, sys, dd, zz, v, Theta, theta_bar,
                                 conservative)
                return np.concatenate([dz, [ddelta]])

            y = rk4_step(ode, y, h)
            if not np.all(np.isfinite(y)):
                raise IntegrationError(f"non-finite state at t={t0}")
            z, delta = y[:-1], float(y[-1])
            if delta < 0.0:
                if delta < -1e-9:
                    log.warning("tube scaling clamped to 0 (was %.3e)", delta)
                delta = 0.0
        out.append(TubeState(z=z.copy(), delta=delta))
    return out


def tightened_constraints(sys: UncertainSystem, consts: TubeConstants,
                          z, v, delta: float) -> Array:
    """h_j(z, v) + c_j * delta for all j (feasible iff all <= 0)."""
    return sys.h(z, v) + consts.c * delta


def rigid_tube_scaling(sys: UncertainSystem, ccm: CCM, consts: TubeConstants,
                       Theta: Polytope, theta_bar, sample_spec: SampleSpec,
                       conservative: bool = False) -> float:
    """Smallest constant scaling with nonpositive tube derivative on the
    sampled constraint set: the fixed point of the scaling ODE at the worst
    sample and vertex pair."""
    th_verts = Theta.vertices()
    d_verts = sys.D.vertices()
    pts = sample_spec.points(sys)
    X, U = sample_spec.split(pts)
    best = 0.0
    for z, v in zip(X, U):
        for th in th_verts:
            dtheta = np.atleast_1d(th) - np.atleast_1d(theta_bar)
            rate = consts.rho_c - consts.L_D - float(consts.L_G @ np.abs(dtheta))
            if rate <= 0:
                raise RigidTubeInfeasible(
                    f"contraction exhausted at vertex {th}: rate {rate:.4g} <= 0")
            for dv in d_verts:
                mis = mismatch_norm(ccm, sys, z, v, dtheta, dv, conservative)
                best = max(best, mis / rate)
    return best
