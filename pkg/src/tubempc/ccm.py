"""Contraction-metric evaluation, sampled verification of the contraction
condition, and the offline tightening constants.

The certificate stores the dual metric W(x) = M(x)^-1 and the gain
parametrization Y(x) = K(x) W(x) as polynomial matrices in the state. The
square root convention is the Cholesky factorization (R^T R = M with R upper
triangular), so ||e||_M = ||R e||.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import CCMDomainError
from .model import UncertainSystem, eval_dynamics, eval_jacobians

Array = np.ndarray


# ---------------------------------------------------------------------------
# Certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CCM:
    """Contraction metric certificate in the dual (W, Y) parametrization."""

    n: int
    m: int
    rho_c: float
    W_terms: tuple[tuple[tuple[int, ...], Array], ...]
    Y_terms: tuple[tuple[tuple[int, ...], Array], ...]
    M_lower: Array
    M_upper: Array
    metadata: dict = field(default_factory=dict, compare=False)

    def eval_W(self, x) -> Array:
        W = np.zeros((self.n, self.n))
        for exps, C in self.W_terms:
            W = W + _mono(x, exps) * C
        return W

    def eval_Y(self, x) -> Array:
        Y = np.zeros((self.m, self.n))
        for exps, C in self.Y_terms:
            Y = Y + _mono(x, exps) * C
        return Y

    def eval_dW(self, x) -> list[Array]:
        """Partial derivatives dW/dx_i, i = 0..n-1."""
        out = [np.zeros((self.n, self.n)) for _ in range(self.n)]
        for exps, C in self.W_terms:
            for i, e in enumerate(exps):
                if e:
                    out[i] = out[i] + _mono_d(x, exps, i) * C
        return out

    def to_json(self) -> dict:
        return {
            "n": self.n, "m": self.m, "rho_c": self.rho_c,
            "W": {"terms": [{"exps": list(e), "coeff": C.tolist()}
                            for e, C in self.W_terms]},
            "Y": {"terms": [{"exps": list(e), "coeff": C.tolist()}
                            for e, C in self.Y_terms]},
            "M_lower": self.M_lower.tolist(),
            "M_upper": self.M_upper.tolist(),
            "metadata": self.metadata,
        }

    def save(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @staticmethod
    def from_json(spec: dict) -> "CCM":
        n = spec["n"]
        Wt = tuple((tuple(t["exps"]), np.asarray(t["coeff"], float))
                   for t in spec["W"]["terms"])
        Yt = tuple((tuple(t["exps"]), np.asarray(t["coeff"], float))
                   for t in spec["Y"]["terms"])
        for _, C in Wt:
            if not np.allclose(C, C.T, atol=1e-10):
                raise ValueError("W coefficient matrices must be symmetric")
        return CCM(n=n, m=spec["m"], rho_c=float(spec["rho_c"]),
                   W_terms=Wt, Y_terms=Yt,
                   M_lower=np.asarray(spec["M_lower"], float),
                   M_upper=np.asarray(spec["M_upper"], float),
                   metadata=spec.get("metadata", {}))

    @staticmethod
    def load(path: str) -> "CCM":
        with open(path) as fh:
            return CCM.from_json(json.load(fh))

    @staticmethod
    def constant(M: Array, K: Array | None = None, rho_c: float = 1.0,
                 slack: float = 0.0) -> "CCM":
        """Constant-metric certificate (W = M^-1, Y = K W)."""
        M = np.atleast_2d(np.asarray(M, float))
        n = M.shape[0]
        W = np.linalg.inv(M)
        K = np.zeros((1, n)) if K is None else np.atleast_2d(np.asarray(K, float))
        Y = K @ W
        zero = tuple([0] * n)
        pad = slack * np.eye(n)
        return CCM(n=n, m=K.shape[0], rho_c=rho_c,
                   W_terms=((zero, W),), Y_terms=((zero, Y),),
                   M_lower=M - pad, M_upper=M + pad)


def _mono(x, exps) -> float:
    v = 1.0
    for xi, e in zip(x, exps):
        if e:
            v *= float(xi) ** e
    return v


def _mono_d(x, exps, i) -> float:
    e = exps[i]
    if e == 0:
        return 0.0
    v = e * float(x[i]) ** (e - 1)
    for j, (xj, ej) in enumerate(zip(x, exps)):
        if j != i and ej:
            v *= float(xj) ** ej
    return v


# ---------------------------------------------------------------------------
# Metric evaluation
# ---------------------------------------------------------------------------

def eval_metric(ccm: CCM, x) -> Array:
    """M(x) = W(x)^-1, symmetric positive definite."""
    W = ccm.eval_W(x)
    try:
        c, low = sla.cho_factor(W)
    except np.linalg.LinAlgError as exc:
        raise CCMDomainError(f"W(x) not positive definite at x={x}") from exc
    except ValueError as exc:
        raise CCMDomainError(f"W(x) evaluation invalid at x={x}") from exc
    M = sla.cho_solve((c, low), np.eye(ccm.n))
    return 0.5 * (M + M.T)


def eval_metric_sqrt(ccm: CCM, x) -> Array:
    """Upper-triangular R with R^T R = M(x)."""
    M = eval_metric(ccm, x)
    try:
        return sla.cholesky(M, lower=False)
    except np.linalg.LinAlgError as exc:
        raise CCMDomainError(f"M(x) Cholesky failed at x={x}") from exc


def metric_sqrt_inv(ccm: CCM, x) -> Array:
    """R^-1 for R = M(x)^(1/2); satisfies (R^-1)(R^-1)^T = M^-1."""
    R = eval_metric_sqrt(ccm, x)
    return sla.solve_triangular(R, np.eye(ccm.n))


def eval_feedback_gain(ccm: CCM, x) -> Array:
    """K(x) = Y(x) W(x)^-1 = Y(x) M(x)."""
    return ccm.eval_Y(x) @ eval_metric(ccm, x)


# ---------------------------------------------------------------------------
# Sampling specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleSpec:
    """Finite point set over the constraint set for verification/maximization.

    Boxes over-approximate the (x, u) projection of the constraint set;
    points violating h_j(x, u) <= 0 can be filtered out.
    """

    x_lo: Array
    x_hi: Array
    u_lo: Array
    u_hi: Array
    n_samples: int = 2000
    method: str = "sobol"     # 'sobol' | 'grid'
    grid_counts: tuple[int, ...] | None = None
    seed: int = 0
    filter_constraints: bool = False

    def __post_init__(self):
        for name in ("x_lo", "x_hi", "u_lo", "u_hi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))

    def points(self, sys: UncertainSystem | None = None) -> Array:
        """(N, nx+nu) array of sample points."""
        lo = np.concatenate([self.x_lo, self.u_lo])
        hi = np.concatenate([self.x_hi, self.u_hi])
        d = lo.size
        if self.method == "grid":
            counts = self.grid_counts or tuple([3] * d)
            axes = [np.linspace(lo[i], hi[i], counts[i]) if hi[i] > lo[i]
                    else np.array([lo[i]]) for i in range(d)]
            mesh = np.meshgrid(*axes, indexing="ij")
            pts = np.column_stack([mm.ravel() for mm in mesh])
        else:
            active = hi > lo
            k = int(active.sum())
            if k == 0:
                pts = lo[None, :].repeat(1, axis=0)
            else:
                sampler = qmc.Sobol(d=k, scramble=True, seed=self.seed)
                unit = sampler.random(self.n_samples)
                pts = np.tile(lo, (self.n_samples, 1))
                pts[:, active] = lo[active] + unit * (hi[active] - lo[active])
        if self.filter_constraints and sys is not None:
            nx = self.x_lo.size
            keep = [i for i in range(pts.shape[0])
                    if np.all(sys.h(pts[i, :nx], pts[i, nx:]) <= 1e-12)]
            pts = pts[keep]
        if pts.shape[0] == 0:
            raise ValueError("sample specification produced an empty point set")
        return pts

    def split(self, pts) -> tuple[Array, Array]:
        nx = self.x_lo.size
        return pts[:, :nx], pts[:, nx:]


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class VerificationReport:
    passed: bool
    worst_contraction: float       # max eig of Mdot + <M Acl> + 2 rho_c M over samples
    tolerance: float
    lower_bound_margin: float      # min eig of M(x) - M_lower over samples
    upper_bound_margin: float      # min eig of M_upper - M(x) over samples
    n_points: int
    worst_point: Array | None = None

    def to_json(self) -> dict:
        return {
            "passed": bool(self.passed),
            "worst_contraction": float(self.worst_contraction),
            "tolerance": float(self.tolerance),
            "lower_bound_margin": float(self.lower_bound_margin),
            "upper_bound_margin": float(self.upper_bound_margin),
            "n_points": int(self.n_points),
            "worst_point": None if self.worst_point is None else self.worst_point.tolist(),
        }


def verify_ccm(sys: UncertainSystem, ccm: CCM, sample_spec: SampleSpec,
               tol_rel: float = 1e-6) -> VerificationReport:
    """Sampled check of the contraction LMI and the constant metric bounds.

    At each sample (x, u) and each vertex pair (theta, d):
        S = Mdot + M Acl + Acl^T M + 2 rho_c M  with  Mdot = -M Wdot M,
        Wdot = sum_i dW/dx_i * xdot_i,  xdot = f_w(x, u, theta, d).
    PASS requires max eig(S) <= tol_rel * ||M(x)|| everywhere and the
    eigenvalue bounds M_lower <= M(x) <= M_upper to hold within tolerance.
    """
    pts = sample_spec.points(sys)
    X, U = sample_spec.split(pts)
    th_verts = sys.Theta0.vertices()
    d_verts = sys.D.vertices()
    worst = -np.inf
    worst_pt = None
    lb_margin = np.inf
    ub_margin = np.inf
    tol_abs = 0.0
    for xi, ui in zip(X, U):
        M = eval_metric(ccm, xi)
        normM = np.linalg.norm(M, 2)
        tol_abs = max(tol_abs, tol_rel * normM)
        dW = ccm.eval_dW(xi)
        K = eval_feedback_gain(ccm, xi)
        lb_margin = min(lb_margin, float(np.linalg.eigvalsh(M - ccm.M_lower)[0]))
        ub_margin = min(ub_margin, float(np.linalg.eigvalsh(ccm.M_upper - M)[0]))
        for th in th_verts:
            for dv in d_verts:
                xdot = eval_dynamics(sys, xi, ui, th, dv)
                Wdot = np.zeros((ccm.n, ccm.n))
                for i in range(ccm.n):
                    if xdot[i] != 0.0:
                        Wdot = Wdot + dW[i] * xdot[i]
                Mdot = -M @ Wdot @ M
                Ax, Bu = eval_jacobians(sys, xi, ui, th, dv)
                Acl = Ax + Bu @ K
                S = Mdot + M @ Acl + Acl.T @ M + 2.0 * ccm.rho_c * M
                lam = float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])
                if lam > worst:
                    worst = lam
                    worst_pt = np.concatenate([xi, ui, th, dv])
    bound_tol = 1e-8 * max(1.0, np.linalg.norm(ccm.M_upper, 2))
    passed = bool((worst <= tol_abs) and (lb_margin >= -bound_tol)
                  and (ub_margin >= -bound_tol))
    return VerificationReport(passed=passed, worst_contraction=worst,
                              tolerance=tol_abs, lower_bound_margin=lb_margin,
                              upper_bound_margin=ub_margin,
                              n_points=pts.shape[0], worst_point=worst_pt)


# ---------------------------------------------------------------------------
# Tightening constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TubeConstants:
    """Offline constants entering the tube dynamics and tightened constraints."""

    rho_c: float
    L_D: float
    L_G: Array
    c: Array

    def __post_init__(self):
        object.__setattr__(self, "L_G", np.atleast_1d(np.asarray(self.L_G, float)))
        object.__setattr__(self, "c", np.atleast_1d(np.asarray(self.c, float)))
        if self.L_D < 0 or np.any(self.L_G < 0) or np.any(self.c < 0):
            raise ValueError("tube constants must be nonnegative")

    @property
    def contractive(self) -> bool:
        return self.rho_c - self.L_D > 0

    def to_json(self) -> dict:
        return {"rho_c": self.rho_c, "L_D": self.L_D,
                "L_G": self.L_G.tolist(), "c": self.c.tolist()}

    @staticmethod
    def from_json(d: dict) -> "TubeConstants":
        return TubeConstants(rho_c=float(d["rho_c"]), L_D=float(d["L_D"]),
                             L_G=np.asarray(d["L_G"], float),
                             c=np.asarray(d["c"], float))


def _sampled_max(values, pts, objective, spec: SampleSpec,
                 refine_frac: float = 0.01, refine: bool = True) -> float:
    """Max of sampled values, optionally refined by local ascent from the top."""
    best = float(np.max(values))
    if not refine or len(values) < 2:
        return best
    lo = np.concatenate([spec.x_lo, spec.u_lo])
    hi = np.concatenate([spec.x_hi, spec.u_hi])
    k = max(1, int(np.ceil(refine_frac * len(values))))
    top = np.argsort(values)[-k:]
    bounds = list(zip(lo, hi))
    for i in top:
        res = minimize(lambda zz: -objective(zz), pts[i], method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": 30})
        best = max(best, float(-res.fun))
    return best


def compute_cj(sys: UncertainSystem, ccm: CCM, sample_spec: SampleSpec,
               safety_factor: float = 1.05, refine: bool = True) -> Array:
    """Constraint tightening factors c_j = max ||(dh/dx + dh/du K) M^-1/2||."""
    pts = sample_spec.points(sys)
    if pts.shape[0] == 0:
        raise ValueError("empty sample set")
    X, U = sample_spec.split(pts)
    nx = sys.n

    def val_j(j, x, u):
        Rinv = metric_sqrt_inv(ccm, x)
        K = eval_feedback_gain(ccm, x)
        hj = sys.constraints[j]
        row = hj.grad_x(x, u) + hj.grad_u(x, u) @ K
        return float(np.linalg.norm(row @ Rinv))

    out = np.empty(sys.r)
    for j in range(sys.r):
        vals = np.array([val_j(j, xi, ui) for xi, ui in zip(X, U)])
        out[j] = _sampled_max(vals, pts, lambda zz: val_j(j, zz[:nx], zz[nx:]),
                              sample_spec, refine=refine)
    return safety_factor * out


def _msqrt_col(ccm: CCM, sys: UncertainSystem, x, u, which: str, k: int) -> Array:
    R = eval_metric_sqrt(ccm, x)
    col = sys.G(x, u)[:, k] if which == "G" else sys.E(x)[:, k]
    return R @ col


def _col_sensitivity(ccm: CCM, sys: UncertainSystem, x, u, which: str, k: int,
                     h: float = 1e-6) -> tuple[Array, Array]:
    """(d/dx, d/du) of M^(1/2) [col]_k by central differences."""
    n, m = sys.n, sys.m
    Dx = np.empty((n, n))
    for i in range(n):
        dx = np.zeros(n)
        dx[i] = h
        Dx[:, i] = (_msqrt_col(ccm, sys, x + dx, u, which, k)
                    - _msqrt_col(ccm, sys, x - dx, u, which, k)) / (2 * h)
    Du = np.empty((n, m))
    for i in range(m):
        du = np.zeros(m)
        du[i] = h
        Du[:, i] = (_msqrt_col(ccm, sys, x, u + du, which, k)
                    - _msqrt_col(ccm, sys, x, u - du, which, k)) / (2 * h)
    return Dx, Du


def compute_LG(sys: UncertainSystem, ccm: CCM, sample_spec: SampleSpec,
               safety_factor: float = 1.05, refine: bool = True) -> Array:
    """Parametric mismatch sensitivities L_G,k (spectral norms, sampled max)."""
    pts = sample_spec.points(sys)
    X, U = sample_spec.split(pts)
    nx = sys.n

    def val_k(k, x, u):
        Dx, Du = _col_sensitivity(ccm, sys, x, u, "G", k)
        K = eval_feedback_gain(ccm, x)
        Gs = Dx + Du @ K
        return float(np.linalg.norm(Gs @ metric_sqrt_inv(ccm, x), 2))

    out = np.empty(sys.p)
    for k in range(sys.p):
        vals = np.array([val_k(k, xi, ui) for xi, ui in zip(X, U)])
        out[k] = _sampled_max(vals, pts, lambda zz: val_k(k, zz[:nx], zz[nx:]),
                              sample_spec, refine=refine)
    return safety_factor * out


def compute_LD(sys: UncertainSystem, ccm: CCM, sample_spec: SampleSpec,
               safety_factor: float = 1.05, refine: bool = True) -> float:
    """Disturbance mismatch sensitivity L_D (max over samples and D vertices)."""
    pts = sample_spec.points(sys)
    X, U = sample_spec.split(pts)
    nx = sys.n
    d_verts = sys.D.vertices()

    def val(x, u):
        Rinv = metric_sqrt_inv(ccm, x)
        Es = [_col_sensitivity(ccm, sys, x, u, "E", j)[0] for j in range(sys.q)]
        best = 0.0
        for dv in d_verts:
            Ssum = np.zeros((sys.n, sys.n))
            for j in range(sys.q):
                Ssum = Ssum + Es[j] * dv[j]
            best = max(best, float(np.linalg.norm(Ssum @ Rinv, 2)))
        return best

    vals = np.array([val(xi, ui) for xi, ui in zip(X, U)])
    best = _sampled_max(vals, pts, lambda zz: val(zz[:nx], zz[nx:]),
                        sample_spec, refine=refine)
    return safety_factor * best


def compute_constants(sys: UncertainSystem, ccm: CCM, sample_spec: SampleSpec,
                      safety_factor: float = 1.05, refine: bool = True) -> TubeConstants:
    """All offline constants in one pass."""
    return TubeConstants(
        rho_c=ccm.rho_c,
        L_D=compute_LD(sys, ccm, sample_spec, safety_factor, refine),
        L_G=compute_LG(sys, ccm, sample_spec, safety_factor, refine),
        c=compute_cj(sys, ccm, sample_spec, safety_factor, refine),
    )
