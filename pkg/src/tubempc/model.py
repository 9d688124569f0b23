"""Uncertain system class: dynamics affine in input, parameter and disturbance,

    xdot = f(x) + B(x) u + G(x, u) theta + E(x) d,

with G itself affine in u, plus the constraint set {h_j(x, u) <= 0} and the
uncertainty polytopes. Includes the planar quadrotor instance and a JSON
loader for polynomial systems.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .polytopes import Polytope

Array = np.ndarray


# ---------------------------------------------------------------------------
# Constraints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintFn:
    """Scalar constraint h(x, u) <= 0 with analytic gradients."""

    name: str
    value: Callable[[Array, Array], float]
    grad_x: Callable[[Array, Array], Array]
    grad_u: Callable[[Array, Array], Array]


def affine_constraint(a_x, a_u, c, name="affine") -> ConstraintFn:
    """h = a_x @ x + a_u @ u + c."""
    a_x = np.asarray(a_x, float)
    a_u = np.asarray(a_u, float)
    return ConstraintFn(
        name=name,
        value=lambda x, u: float(a_x @ x + a_u @ u + c),
        grad_x=lambda x, u: a_x,
        grad_u=lambda x, u: a_u,
    )


def box_constraints(n: int, m: int, x_bounds: dict[int, tuple[float, float]],
                    u_bounds: dict[int, tuple[float, float]],
                    names_x: dict[int, str] | None = None) -> list[ConstraintFn]:
    """Expand per-coordinate boxes into one-sided affine constraints."""
    cons = []
    names_x = names_x or {}
    for i, (lo, hi) in x_bounds.items():
        nm = names_x.get(i, f"x{i}")
        e = np.zeros(n)
        e[i] = 1.0
        cons.append(affine_constraint(e, np.zeros(m), -hi, f"{nm}<= {hi}"))
        cons.append(affine_constraint(-e, np.zeros(m), lo, f"{nm}>= {lo}"))
    for i, (lo, hi) in u_bounds.items():
        e = np.zeros(m)
        e[i] = 1.0
        cons.append(affine_constraint(np.zeros(n), e, -hi, f"u{i}<= {hi}"))
        cons.append(affine_constraint(np.zeros(n), -e, lo, f"u{i}>= {lo}"))
    return cons


def keepout_disc(n: int, m: int, idx: Sequence[int], center, radius: float,
                 name: str = "keepout") -> ConstraintFn:
    """Circular obstacle r^2 - ||x[idx] - c||^2 <= 0 (state must stay outside)."""
    idx = list(idx)
    c = np.asarray(center, float)

    def val(x, u):
        e = x[idx] - c
        return float(radius ** 2 - e @ e)

    def gx(x, u):
        g = np.zeros(n)
        g[idx] = -2.0 * (x[idx] - c)
        return g

    return ConstraintFn(name=name, value=val, grad_x=gx,
                        grad_u=lambda x, u: np.zeros(m))


def keepout_norm(n: int, m: int, idx: Sequence[int], center, radius: float,
                 name: str = "keepout") -> ConstraintFn:
    """Obstacle in distance form r - ||x[idx] - c|| <= 0.

    Unit gradient magnitude keeps the tightening constant at ~1 regardless of
    the domain size (the quadratic form's constant grows with the box).
    """
    idx = list(idx)
    c = np.asarray(center, float)

    def val(x, u):
        return float(radius - np.linalg.norm(x[idx] - c))

    def gx(x, u):
        g = np.zeros(n)
        e = x[idx] - c
        nn = np.linalg.norm(e)
        if nn > 1e-12:
            g[idx] = -e / nn
        return g

    return ConstraintFn(name=name, value=val, grad_x=gx,
                        grad_u=lambda x, u: np.zeros(m))


# ---------------------------------------------------------------------------
# System
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UncertainSystem:
    """Immutable container for one uncertain system instance.

    Field callables are pure; analytic Jacobians may be supplied, otherwise
    central finite differences are used.
    """

    n: int
    m: int
    p: int
    q: int
    f: Callable[[Array], Array]
    B: Callable[[Array], Array]
    G: Callable[[Array, Array], Array]
    E: Callable[[Array], Array]
    constraints: tuple[ConstraintFn, ...]
    Theta0: Polytope
    D: Polytope
    D_eps: Polytope
    name: str = "system"
    jac_x: Callable[[Array, Array, Array, Array], Array] | None = field(default=None)
    jac_u: Callable[[Array, Array], Array] | None = field(default=None)

    @property
    def r(self) -> int:
        return len(self.constraints)

    def h(self, x, u) -> Array:
        return np.array([c.value(x, u) for c in self.constraints])


def eval_dynamics(sys: UncertainSystem, x, u, theta, d) -> Array:
    """Full uncertain vector field f(x) + B(x)u + G(x,u)theta + E(x)d."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    theta = np.atleast_1d(np.asarray(theta, float))
    d = np.atleast_1d(np.asarray(d, float))
    if x.shape != (sys.n,) or u.shape != (sys.m,):
        raise ValueError(f"state/input dims must be ({sys.n},)/({sys.m},), "
                         f"got {x.shape}/{u.shape}")
    if theta.shape != (sys.p,) or d.shape != (sys.q,):
        raise ValueError(f"theta/d dims must be ({sys.p},)/({sys.q},), "
                         f"got {theta.shape}/{d.shape}")
    return (sys.f(x) + sys.B(x) @ u + sys.G(x, u) @ theta + sys.E(x) @ d)


def eval_nominal(sys: UncertainSystem, z, v, theta_bar) -> Array:
    """Nominal vector field: the uncertain dynamics at d = 0."""
    return eval_dynamics(sys, z, v, theta_bar, np.zeros(sys.q))


def eval_jacobians(sys: UncertainSystem, x, u, theta, d,
                   fd_step: float = 1e-6) -> tuple[Array, Array]:
    """Jacobians (d f_w/dx, d f_w/du) at a point.

    B_u is independent of d by the affine structure. Analytic callables are
    used when the system provides them; otherwise central differences.
    """
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    theta = np.atleast_1d(np.asarray(theta, float))
    d = np.atleast_1d(np.asarray(d, float))
    if sys.jac_x is not None:
        Ax = sys.jac_x(x, u, theta, d)
    else:
        Ax = np.empty((sys.n, sys.n))
        for i in range(sys.n):
            dx = np.zeros(sys.n)
            dx[i] = fd_step
            Ax[:, i] = (eval_dynamics(sys, x + dx, u, theta, d)
                        - eval_dynamics(sys, x - dx, u, theta, d)) / (2 * fd_step)
    if sys.jac_u is not None:
        Bu = sys.jac_u(x, theta)
    else:
        Bu = np.empty((sys.n, sys.m))
        for i in range(sys.m):
            du = np.zeros(sys.m)
            du[i] = fd_step
            Bu[:, i] = (eval_dynamics(sys, x, u + du, theta, d)
                        - eval_dynamics(sys, x, u - du, theta, d)) / (2 * fd_step)
    return Ax, Bu


# ---------------------------------------------------------------------------
# Planar quadrotor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadrotorParams:
    """Physical constants (SI). theta_true = 1/m is the uncertain parameter."""

    g: float = 9.81
    m: float = 1.0 / 2.058
    l: float = 0.25
    J: float = 0.00383

    def __post_init__(self):
        if self.m <= 0 or self.J <= 0 or self.l <= 0:
            raise ValueError("mass, inertia and arm length must be positive")

    @property
    def theta_true(self) -> float:
        return 1.0 / self.m


def quadrotor_model(params: QuadrotorParams = QuadrotorParams(),
                    theta0_center: float = 2.058,
                    theta0_rel_width: float = 0.01,
                    d_max: float = 0.1,
                    eps_max: float = 0.1,
                    extra_constraints: Sequence[ConstraintFn] = ()) -> UncertainSystem:
    """Planar quadrotor with uncertain inverse mass.

    State x = (p1, p2, phi, v1, v2, phidot); body-frame velocities. Since
    theta = 1/m multiplies only the total-thrust acceleration, the input
    matrix keeps the deterministic moment column and the thrust row moves
    entirely into G:

        B(x) u     -> moments only, rows (.., l/J u1 - l/J u2)
        G(x,u) th  -> th * (u1 + u2) on the v2dot row

    so that f(x) + B u + G th reproduces the physical model at th = 1/m.
    The hover input g/(2 th) [1, 1] then gives xdot = 0 at the origin.
    """
    g, l, J = params.g, params.l, params.J
    n, m, p, q = 6, 2, 1, 1

    def f(x):
        _, _, phi, v1, v2, pd = x
        c, s = np.cos(phi), np.sin(phi)
        return np.array([v1 * c - v2 * s,
                         v1 * s + v2 * c,
                         pd,
                         v2 * pd - g * s,
                         -v1 * pd - g * c,
                         0.0])

    def B(x):
        Bm = np.zeros((n, m))
        Bm[5, 0] = l / J
        Bm[5, 1] = -l / J
        return Bm

    def G(x, u):
        Gm = np.zeros((n, p))
        Gm[4, 0] = u[0] + u[1]
        return Gm

    def E(x):
        phi = x[2]
        return np.array([[0.0], [0.0], [0.0],
                         [np.cos(phi)], [-np.sin(phi)], [0.0]])

    def jac_x(x, u, theta, d):
        _, _, phi, v1, v2, pd = x
        c, s = np.cos(phi), np.sin(phi)
        dd = float(d[0])
        A = np.zeros((n, n))
        A[0, 2] = -v1 * s - v2 * c
        A[0, 3] = c
        A[0, 4] = -s
        A[1, 2] = v1 * c - v2 * s
        A[1, 3] = s
        A[1, 4] = c
        A[2, 5] = 1.0
        A[3, 2] = -g * c - s * dd
        A[3, 4] = pd
        A[3, 5] = v2
        A[4, 2] = g * s - c * dd
        A[4, 3] = -pd
        A[4, 5] = -v1
        return A

    def jac_u(x, theta):
        Bu = np.zeros((n, m))
        Bu[4, :] = theta[0]
        Bu[5, 0] = l / J
        Bu[5, 1] = -l / J
        return Bu

    cons = box_constraints(
        n, m,
        x_bounds={2: (-np.pi / 3, np.pi / 3), 3: (-2.0, 2.0),
                  4: (-1.0, 1.0), 5: (-np.pi, np.pi)},
        u_bounds={0: (-1.0, 3.5), 1: (-1.0, 3.5)},
        names_x={2: "phi", 3: "v1", 4: "v2", 5: "phidot"},
    )
    cons = list(cons) + list(extra_constraints)

    half = theta0_rel_width * theta0_center
    Theta0 = Polytope.from_interval(theta0_center - half, theta0_center + half)
    D = Polytope.from_interval(-d_max, d_max)
    # derivative-measurement noise acts on the velocity rows matching E's support
    lim = np.zeros(n)
    lim[3] = lim[4] = eps_max
    D_eps = Polytope.from_box(-lim, lim)

    return UncertainSystem(n=n, m=m, p=p, q=q, f=f, B=B, G=G, E=E,
                           constraints=tuple(cons), Theta0=Theta0, D=D,
                           D_eps=D_eps, name="planar_quadrotor",
                           jac_x=jac_x, jac_u=jac_u)


# ---------------------------------------------------------------------------
# Polynomial systems from JSON
# ---------------------------------------------------------------------------

class PolyMap:
    """Polynomial map with matrix-valued coefficients.

    value(x[, u]) = sum_t coeff_t * prod_i x_i^ex_t[i] * prod_j u_j^eu_t[j]

    Exponent vectors are sparse in practice; terms precompute their nonzero
    (index, power) lists so evaluation avoids array temporaries.
    """

    def __init__(self, shape, terms, nx, nu=0):
        self.shape = tuple(shape)
        self.nx = nx
        self.nu = nu
        self.terms = []
        for t in terms:
            ex = np.asarray(t.get("exps_x", [0] * nx), int)
            eu = np.asarray(t.get("exps_u", [0] * nu), int) if nu else np.zeros(0, int)
            coeff = np.asarray(t["coeff"], float).reshape(self.shape)
            nzx = [(i, int(e)) for i, e in enumerate(ex) if e]
            nzu = [(j, int(e)) for j, e in enumerate(eu) if e]
            self.terms.append((ex, eu, coeff, nzx, nzu))

    def max_u_degree(self) -> int:
        return max((int(eu.sum()) for _, eu, _, _, _ in self.terms), default=0)

    def __call__(self, x, u=None):
        out = np.zeros(self.shape)
        for _, _, coeff, nzx, nzu in self.terms:
            mono = 1.0
            for i, e in nzx:
                mono *= float(x[i]) ** e
            for j, e in nzu:
                mono *= float(u[j]) ** e
            out += mono * coeff
        return out

    def jac_x(self, x, u=None):
        """List over state index i of d(value)/dx_i (each of self.shape)."""
        out = [np.zeros(self.shape) for _ in range(self.nx)]
        for _, _, coeff, nzx, nzu in self.terms:
            base_u = 1.0
            for j, e in nzu:
                base_u *= float(u[j]) ** e
            for i, e in nzx:
                mono = e * float(x[i]) ** (e - 1) * base_u
                for i2, e2 in nzx:
                    if i2 != i:
                        mono *= float(x[i2]) ** e2
                out[i] += mono * coeff
        return out

    def jac_u(self, x, u):
        out = [np.zeros(self.shape) for _ in range(self.nu)]
        for _, _, coeff, nzx, nzu in self.terms:
            base_x = 1.0
            for i, e in nzx:
                base_x *= float(x[i]) ** e
            for j, e in nzu:
                mono = e * float(u[j]) ** (e - 1) * base_x
                for j2, e2 in nzu:
                    if j2 != j:
                        mono *= float(u[j2]) ** e2
                out[j] += mono * coeff
        return out


def _constraint_from_dict(c, n, m) -> ConstraintFn:
    kind = c["type"]
    if kind == "affine":
        return affine_constraint(c.get("a_x", [0.0] * n), c.get("a_u", [0.0] * m),
                                 c.get("c", 0.0), c.get("name", "affine"))
    if kind == "keepout_disc":
        return keepout_disc(n, m, c["idx"], c["center"], c["radius"],
                            c.get("name", "keepout"))
    if kind == "keepout_norm":
        return keepout_norm(n, m, c["idx"], c["center"], c["radius"],
                            c.get("name", "keepout"))
    raise ValueError(f"unknown constraint type {kind!r}")


def load_system(source) -> UncertainSystem:
    """Build an UncertainSystem from the documented JSON schema.

    `source` is a path or a dict. Fields f, B, E are polynomial in x; G is
    polynomial in (x, u) with u-degree at most 1.
    """
    if isinstance(source, (str, bytes)):
        with open(source) as fh:
            spec = json.load(fh)
    else:
        spec = source
    dims = spec["dims"]
    n, m, p, q = dims["n"], dims["m"], dims["p"], dims["q"]
    fP = PolyMap([n], spec["f"]["terms"], n)
    BP = PolyMap([n, m], spec["B"]["terms"], n)
    GP = PolyMap([n, p], spec["G"]["terms"], n, m)
    EP = PolyMap([n, q], spec["E"]["terms"], n)
    if GP.max_u_degree() > 1:
        raise ValueError("G must be affine in u")
    cons = tuple(_constraint_from_dict(c, n, m) for c in spec.get("constraints", []))
    Theta0 = Polytope.from_dict(spec["Theta0"])
    D = Polytope.from_dict(spec["D"])
    D_eps = Polytope.from_dict(spec["D_eps"]) if "D_eps" in spec else Polytope.singleton(np.zeros(n))

    def jac_x(x, u, theta, d):
        A = np.column_stack([j for j in fP.jac_x(x)])
        for i, Bi in enumerate(BP.jac_x(x)):
            A[:, i] += Bi @ u
        for i, Gi in enumerate(GP.jac_x(x, u)):
            A[:, i] += Gi @ theta
        for i, Ei in enumerate(EP.jac_x(x)):
            A[:, i] += Ei @ d
        return A

    def jac_u(x, theta):
        Bu = BP(x).copy()
        # G affine in u: u-jacobian of G theta is exact at any u
        for j, Gj in enumerate(GP.jac_u(x, np.zeros(m))):
            Bu[:, j] += Gj @ theta
        return Bu

    return UncertainSystem(
        n=n, m=m, p=p, q=q,
        f=lambda x: fP(x), B=lambda x: BP(x),
        G=lambda x, u: GP(x, u), E=lambda x: EP(x),
        constraints=cons, Theta0=Theta0, D=D, D_eps=D_eps,
        name=spec.get("name", "system"), jac_x=jac_x, jac_u=jac_u)
