"""Geodesics of the state-dependent metric via Chebyshev pseudospectral
discretization.

Curves gamma: [0,1] -> R^n are degree-D polynomials interpolated at
Chebyshev-Gauss-Lobatto nodes with fixed endpoints gamma(0) = z,
gamma(1) = x. The Riemannian energy

    E = int_0^1 gamma_s(s)^T M(gamma(s)) gamma_s(s) ds

is evaluated by Clenshaw-Curtis quadrature and minimized over the interior
node values; at the optimum E equals the squared incremental distance, so
the distance is reported as sqrt(E) (smooth objective, unlike the length).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize

from .ccm import CCM, eval_feedback_gain, eval_metric, eval_metric_sqrt
from .errors import GeodesicError

Array = np.ndarray


# ---------------------------------------------------------------------------
# Chebyshev machinery on [0, 1]
# ---------------------------------------------------------------------------

def cgl_nodes(D: int) -> Array:
    """Chebyshev-Gauss-Lobatto nodes mapped to [0,1], ascending."""
    i = np.arange(D + 1)
    return 0.5 * (1.0 - np.cos(np.pi * i / D))


def _diff_matrix(D: int) -> Array:
    """Differentiation matrix at CGL nodes on [0,1] (ascending order)."""
    # standard matrix on x_j = cos(pi*j/D); the map s = (1-x)/2 keeps the
    # index order (s_j ascending), so only the chain rule factor -2 applies
    N = D
    if N == 0:
        return np.zeros((1, 1))
    x = np.cos(np.pi * np.arange(N + 1) / N)
    c = np.hstack([2.0, np.ones(N - 1), 2.0]) * (-1.0) ** np.arange(N + 1)
    X = np.tile(x, (N + 1, 1)).T
    dX = X - X.T
    Dm = np.outer(c, 1.0 / c) / (dX + np.eye(N + 1))
    Dm -= np.diag(Dm.sum(axis=1))
    return -2.0 * Dm


def _barycentric_weights(D: int) -> Array:
    w = (-1.0) ** np.arange(D + 1)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def interp_matrix(D: int, s_eval: Array) -> Array:
    """Barycentric interpolation matrix from D+1 CGL values to points s_eval."""
    s = cgl_nodes(D)
    w = _barycentric_weights(D)
    P = np.zeros((len(s_eval), D + 1))
    for k, se in enumerate(np.asarray(s_eval, float)):
        diff = se - s
        hit = np.argmin(np.abs(diff))
        if abs(diff[hit]) < 1e-14:
            P[k, hit] = 1.0
            continue
        terms = w / diff
        P[k] = terms / terms.sum()
    return P


def clenshaw_curtis(nq: int) -> tuple[Array, Array]:
    """Clenshaw-Curtis nodes and weights on [0,1] with nq points."""
    N = nq - 1
    theta = np.pi * np.arange(N + 1) / N
    x = np.cos(theta)
    w = np.zeros(N + 1)
    ii = np.arange(1, N)
    v = np.ones(N - 1)
    if N % 2 == 0:
        w[0] = w[N] = 1.0 / (N ** 2 - 1)
        for k in range(1, N // 2):
            v -= 2.0 * np.cos(2 * k * theta[ii]) / (4 * k ** 2 - 1)
        v -= np.cos(N * theta[ii]) / (N ** 2 - 1)
    else:
        w[0] = w[N] = 1.0 / N ** 2
        for k in range(1, (N - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[ii]) / (4 * k ** 2 - 1)
    w[ii] = 2.0 * v / N
    s = 0.5 * (1.0 + x[::-1])
    return s, 0.5 * w[::-1]


@lru_cache(maxsize=32)
def curve_basis(D: int, nq: int | None = None):
    """(s_quad, weights, Phi, Psi): interpolation and derivative-interpolation
    matrices from node values to the quadrature grid."""
    if nq is None:
        nq = 2 * D + 3
    sq, wq = clenshaw_curtis(nq)
    Phi = interp_matrix(D, sq)
    Psi = Phi @ _diff_matrix(D)
    return sq, wq, Phi, Psi


# ---------------------------------------------------------------------------
# Energy and curve container
# ---------------------------------------------------------------------------

def curve_energy(ccm: CCM, V: Array, nq: int | None = None,
                 with_grad: bool = True) -> tuple[float, Array | None]:
    """Quadrature energy of the curve with node values V ((D+1) x n) and its
    gradient with respect to every node value (including the endpoints)."""
    D = V.shape[0] - 1
    _, wq, Phi, Psi = curve_basis(D, nq)
    Y = Phi @ V
    Gm = Psi @ V
    E = 0.0
    grad = np.zeros_like(V) if with_grad else None
    for qi in range(len(wq)):
        y, gvec = Y[qi], Gm[qi]
        M = eval_metric(ccm, y)
        Mg = M @ gvec
        E += wq[qi] * float(gvec @ Mg)
        if with_grad:
            grad += 2.0 * wq[qi] * np.outer(Psi[qi], Mg)
            dW = ccm.eval_dW(y)
            kap = np.empty(ccm.n)
            for i in range(ccm.n):
                # dM/dx_i = -M dW/dx_i M
                kap[i] = -float(Mg @ dW[i] @ Mg)
            grad += wq[qi] * np.outer(Phi[qi], kap)
    return E, grad


def curve_length(ccm: CCM, V: Array, nq: int | None = None) -> float:
    """Quadrature of the Riemannian length (independent of the energy value)."""
    D = V.shape[0] - 1
    _, wq, Phi, Psi = curve_basis(D, nq)
    Y = Phi @ V
    Gm = Psi @ V
    L = 0.0
    for qi in range(len(wq)):
        R = eval_metric_sqrt(ccm, Y[qi])
        L += wq[qi] * float(np.linalg.norm(R @ Gm[qi]))
    return L


@dataclass
class GeodesicCurve:
    """Discretized geodesic between z = gamma(0) and x = gamma(1)."""

    degree: int
    nodes: Array          # CGL parameters s_i in [0,1]
    values: Array         # (D+1) x n node values
    deriv_values: Array   # gamma_s at the nodes
    length: float         # quadrature Riemannian length
    energy: float         # quadrature Riemannian energy
    converged: bool = True

    @property
    def z(self) -> Array:
        return self.values[0]

    @property
    def x(self) -> Array:
        return self.values[-1]

    def to_json(self) -> dict:
        return {"degree": self.degree, "nodes": self.nodes.tolist(),
                "values": self.values.tolist(),
                "deriv_values": self.deriv_values.tolist(),
                "length": self.length, "energy": self.energy,
                "converged": self.converged}


@dataclass(frozen=True)
class GeodesicOptions:
    degree: int = 2
    grad_tol: float = 1e-8
    max_iter: int = 200
    nq: int | None = None   # defaults to 2*degree + 3


def solve_geodesic(ccm: CCM, x, z, opts: GeodesicOptions = GeodesicOptions()) -> GeodesicCurve:
    """Minimum-energy degree-D curve from z to x under the metric M.

    Decision variables are the interior node values; the initial guess is the
    straight segment. Raises GeodesicError (best iterate attached) when the
    inner solver does not reach the gradient tolerance.
    """
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
        raise ValueError("geodesic endpoints must be finite")
    D = opts.degree
    n = ccm.n
    s = cgl_nodes(D)
    V0 = z[None, :] + s[:, None] * (x - z)[None, :]

    def make_curve(V, converged=True):
        Dm = _diff_matrix(D)
        E, _ = curve_energy(ccm, V, opts.nq, with_grad=False)
        return GeodesicCurve(degree=D, nodes=s.copy(), values=V.copy(),
                             deriv_values=Dm @ V,
                             length=curve_length(ccm, V, opts.nq),
                             energy=E, converged=converged)

    if np.allclose(x, z, rtol=0.0, atol=1e-15):
        return GeodesicCurve(degree=D, nodes=s.copy(), values=V0,
                             deriv_values=np.zeros_like(V0),
                             length=0.0, energy=0.0)
    if D < 2:
        return make_curve(V0)

    def pack(Vint):
        V = V0.copy()
        V[1:D] = Vint.reshape(D - 1, n)
        return V

    def fun(Vint):
        E, gr = curve_energy(ccm, pack(Vint), opts.nq)
        return E, gr[1:D].ravel()

    res = minimize(fun, V0[1:D].ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": opts.max_iter, "gtol": opts.grad_tol,
                            "ftol": 1e-16})
    V = pack(res.x)
    gnorm = float(np.max(np.abs(res.jac))) if res.jac is not None else np.inf
    scale = max(1.0, abs(float(res.fun)))
    if not (res.success or gnorm <= 1e-5 * scale):
        raise GeodesicError(f"geodesic solver stalled: {res.message}",
                            best=make_curve(V, converged=False))
    return make_curve(V)


def v_delta(ccm: CCM, x, z, opts: GeodesicOptions = GeodesicOptions()) -> float:
    """Incremental distance sqrt(E) of the computed geodesic."""
    return float(np.sqrt(max(solve_geodesic(ccm, x, z, opts).energy, 0.0)))


def riemann_energy(curve: GeodesicCurve, ccm: CCM) -> float:
    """Quadrature energy of an existing curve."""
    E, _ = curve_energy(ccm, curve.values, with_grad=False)
    return E


def feedback_kappa(ccm: CCM, x, z, v,
                   opts: GeodesicOptions = GeodesicOptions()) -> Array:
    """Tracking feedback: v plus the feedback gain integrated along the geodesic."""
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    v = np.asarray(v, float)
    if np.array_equal(x, z):
        return v.copy()
    curve = solve_geodesic(ccm, x, z, opts)
    _, wq, Phi, Psi = curve_basis(curve.degree, opts.nq)
    Y = Phi @ curve.values
    Gm = Psi @ curve.values
    du = np.zeros_like(v)
    for qi in range(len(wq)):
        du += wq[qi] * (eval_feedback_gain(ccm, Y[qi]) @ Gm[qi])
    return v + du
