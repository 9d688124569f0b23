"""Receding-horizon optimal control problem: direct multiple shooting
transcription of the homothetic tube program and its solution interface.

Decision variables: nominal shooting nodes z, piecewise-constant inputs v,
tube scaling nodes delta, nominal parameter theta_bar, terminal bound
delta_f_bar, per-interval mismatch bounds w_bar, optional |theta^i - theta_bar|
helper variables, and the interior nodes of the initial-state geodesic.

The scaling dynamics use the auxiliary-variable form
    ddelta = -(rho_c - L_D) delta + w_bar,
with w_bar lower-bounded by the vertex mismatch expressions at each interval
start. Mismatch norms are smoothed as sqrt(||.||^2 + eps^2), a conservative
(over-)bound that keeps the program smooth at zero mismatch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .ccm import CCM, TubeConstants, eval_metric, eval_metric_sqrt
from .errors import OCPInfeasible, ReferencePointError
from .geodesics import GeodesicOptions, cgl_nodes, curve_energy, solve_geodesic
from .model import UncertainSystem, eval_jacobians, eval_nominal
from .nlp import NLPProblem, SQPOptions, SQPResult, solve_nlp
from .polytopes import Polytope
from .tube import w_bar_requirement

Array = np.ndarray


# ---------------------------------------------------------------------------
# Configuration and reference maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MPCConfig:
    N: int
    T_s: float
    Q: Array
    R: Array
    substeps: int = 1
    geodesic_degree: int = 2
    norm_eps: float = 1e-8
    enforce_substeps: bool = False
    # restrictive initial-state variant: z_0 = x(t), delta_0 = 0 (drops the
    # geodesic membership row; forgoes the terminal-equality feasibility proof)
    pin_initial_state: bool = False
    solver: SQPOptions = field(default_factory=SQPOptions)

    def __post_init__(self):
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, float)))
        if self.N < 1 or self.T_s <= 0:
            raise ValueError("need N >= 1 and T_s > 0")
        for M, nm in ((self.Q, "Q"), (self.R, "R")):
            if np.linalg.eigvalsh(0.5 * (M + M.T))[0] <= 0:
                raise ValueError(f"{nm} must be positive definite")


@dataclass(frozen=True)
class ReferenceMap:
    """Parameter-dependent steady state with derivatives for the transcription."""

    z_ref: Callable[[Array], Array]
    v_ref: Callable[[Array], Array]
    dz_dtheta: Callable[[Array], Array]   # n x p
    dv_dtheta: Callable[[Array], Array]   # m x p


def quadrotor_reference(sys: UncertainSystem, g: float = 9.81) -> ReferenceMap:
    """Hover at the origin: v_ref = g/(2 theta) [1, 1]."""
    n, m, p = sys.n, sys.m, sys.p

    return ReferenceMap(
        z_ref=lambda th: np.zeros(n),
        v_ref=lambda th: (g / (2.0 * th[0])) * np.ones(m),
        dz_dtheta=lambda th: np.zeros((n, p)),
        dv_dtheta=lambda th: (-g / (2.0 * th[0] ** 2)) * np.ones((m, p)),
    )


def constant_reference(z_ref: Array, v_ref: Array, n: int, m: int, p: int) -> ReferenceMap:
    z0 = np.asarray(z_ref, float)
    v0 = np.asarray(v_ref, float)
    return ReferenceMap(
        z_ref=lambda th: z0,
        v_ref=lambda th: v0,
        dz_dtheta=lambda th: np.zeros((n, p)),
        dv_dtheta=lambda th: np.zeros((m, p)),
    )


def reference_point(sys: UncertainSystem, theta_bar, C=None, D=None, y_d=None,
                    guess: tuple[Array, Array] | None = None,
                    opts: SQPOptions | None = None) -> tuple[Array, Array]:
    """Feasible steady state for one parameter value.

    Solves  min ||C z + D v - y_d||^2  s.t. f_bar(z, v, theta) = 0 and the
    state/input constraints, via the built-in SQP.
    """
    theta_bar = np.atleast_1d(np.asarray(theta_bar, float))
    n, m = sys.n, sys.m
    C = np.zeros((n, n)) if C is None else np.atleast_2d(np.asarray(C, float))
    D = np.zeros((C.shape[0], m)) if D is None else np.atleast_2d(np.asarray(D, float))
    y_d = np.zeros(C.shape[0]) if y_d is None else np.atleast_1d(np.asarray(y_d, float))

    def objective(zz):
        z, v = zz[:n], zz[n:]
        res = C @ z + D @ v - y_d
        g = np.concatenate([2 * C.T @ res, 2 * D.T @ res])
        return float(res @ res), g

    def eqs(zz):
        z, v = zz[:n], zz[n:]
        c = eval_nominal(sys, z, v, theta_bar)
        Ax, Bu = eval_jacobians(sys, z, v, theta_bar, np.zeros(sys.q))
        return c, np.hstack([Ax, Bu])

    def ineqs(zz):
        z, v = zz[:n], zz[n:]
        c = sys.h(z, v)
        J = np.zeros((sys.r, n + m))
        for j, hj in enumerate(sys.constraints):
            J[j, :n] = hj.grad_x(z, v)
            J[j, n:] = hj.grad_u(z, v)
        return c, J

    x0 = np.zeros(n + m) if guess is None else np.concatenate(guess)
    H = np.zeros((n + m, n + m))
    H[:n, :n] = 2 * C.T @ C
    H[n:, n:] = 2 * D.T @ D
    prob = NLPProblem(n=n + m, objective=objective, eq_constraints=eqs,
                      ineq_constraints=ineqs, x0=x0,
                      hessian=lambda zz, *_: H + 1e-8 * np.eye(n + m))
    res = solve_nlp(prob, opts or SQPOptions(max_iter=100))
    if res.feasibility > 1e-6:
        raise ReferencePointError(
            f"no feasible steady state at theta={theta_bar}: status {res.status}")
    return res.x[:n], res.x[n:]


def fd_reference_map(sys: UncertainSystem, C=None, D=None, y_d=None,
                     h: float = 1e-6) -> ReferenceMap:
    """ReferenceMap backed by the steady-state program, derivatives by FD."""

    def pair(th):
        return reference_point(sys, th, C, D, y_d)

    def dz(th):
        th = np.atleast_1d(th)
        out = np.zeros((sys.n, sys.p))
        for k in range(sys.p):
            e = np.zeros(sys.p)
            e[k] = h
            out[:, k] = (pair(th + e)[0] - pair(th - e)[0]) / (2 * h)
        return out

    def dv(th):
        th = np.atleast_1d(th)
        out = np.zeros((sys.m, sys.p))
        for k in range(sys.p):
            e = np.zeros(sys.p)
            e[k] = h
            out[:, k] = (pair(th + e)[1] - pair(th - e)[1]) / (2 * h)
        return out

    return ReferenceMap(z_ref=lambda th: pair(np.atleast_1d(th))[0],
                        v_ref=lambda th: pair(np.atleast_1d(th))[1],
                        dz_dtheta=dz, dv_dtheta=dv)


# ---------------------------------------------------------------------------
# RK4 with sensitivities and cost quadrature
# ---------------------------------------------------------------------------

def _rk4_sens(sys: UncertainSystem, z, v, th, h, ref: ReferenceMap, Q, R):
    """One nominal RK4 step with sensitivities and tracking-cost quadrature.

    Returns (z_next, Phi_z, Phi_v, Phi_th, q, dq_dz, dq_dv, dq_dth).
    """
    n, m, p = sys.n, sys.m, sys.p
    dzero = np.zeros(sys.q)
    In = np.eye(n)
    zr = ref.z_ref(th)
    vr = ref.v_ref(th)
    dzr = ref.dz_dtheta(th)
    dvr = ref.dv_dtheta(th)
    ev = v - vr
    lv = 2.0 * (R @ ev)

    stages_z = []
    stages_dz = []   # (dz/dz0, dz/dv, dz/dth) of the stage POINT
    ks = []
    dks = []

    def fjac(zz):
        f = eval_nominal(sys, zz, v, th)
        A, B = eval_jacobians(sys, zz, v, th, dzero)
        G = sys.G(zz, v)
        return f, A, B, G

    # stage points s1..s4 and their sensitivities
    s = z
    Sz, Sv, St = In.copy(), np.zeros((n, m)), np.zeros((n, p))
    for i, c in enumerate((0.5, 0.5, 1.0)):
        f, A, B, G = fjac(s)
        ks.append(f)
        dk_dz = A @ Sz
        dk_dv = A @ Sv + B
        dk_dth = A @ St + G
        dks.append((dk_dz, dk_dv, dk_dth))
        stages_z.append(s)
        stages_dz.append((Sz.copy(), Sv.copy(), St.copy()))
        s = z + c * h * f
        Sz = In + c * h * dk_dz
        Sv = c * h * dk_dv
        St = c * h * dk_dth
    f, A, B, G = fjac(s)
    ks.append(f)
    dks.append((A @ Sz, A @ Sv + B, A @ St + G))
    stages_z.append(s)
    stages_dz.append((Sz.copy(), Sv.copy(), St.copy()))

    w = np.array([1.0, 2.0, 2.0, 1.0]) * (h / 6.0)
    z_next = z + sum(wi * ki for wi, ki in zip(w, ks))
    Phi_z = In + sum(wi * dk[0] for wi, dk in zip(w, dks))
    Phi_v = sum(wi * dk[1] for wi, dk in zip(w, dks))
    Phi_th = sum(wi * dk[2] for wi, dk in zip(w, dks))

    q = 0.0
    dq_dz = np.zeros(n)
    dq_dv = np.zeros(m)
    dq_dth = np.zeros(p)
    for wi, sp, (Sz_i, Sv_i, St_i) in zip(w, stages_z, stages_dz):
        e = sp - zr
        lz = 2.0 * (Q @ e)
        q += wi * (float(e @ Q @ e) + float(ev @ R @ ev))
        dq_dz += wi * (Sz_i.T @ lz)
        dq_dv += wi * (Sv_i.T @ lz + lv)
        dq_dth += wi * (St_i.T @ lz - dzr.T @ lz - dvr.T @ lv)
    return z_next, Phi_z, Phi_v, Phi_th, q, dq_dz, dq_dv, dq_dth


def _rk4_plain(sys: UncertainSystem, z, v, th, h, ref: ReferenceMap, Q, R):
    """Nominal RK4 step and tracking-cost quadrature, values only."""
    zr = ref.z_ref(th)
    vr = ref.v_ref(th)
    ev = v - vr
    uc = float(ev @ R @ ev)

    def f(zz):
        return eval_nominal(sys, zz, v, th)

    k1 = f(z)
    s2 = z + 0.5 * h * k1
    k2 = f(s2)
    s3 = z + 0.5 * h * k2
    k3 = f(s3)
    s4 = z + h * k3
    k4 = f(s4)
    z_next = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def l(zz):
        e = zz - zr
        return float(e @ Q @ e) + uc

    q = (h / 6.0) * (l(z) + 2 * l(s2) + 2 * l(s3) + l(s4))
    return z_next, q


def _delta_step_coeffs(lam: float, h: float) -> tuple[float, float]:
    """RK4 coefficients for ddelta = -lam delta + w with constant w."""
    a = lam * h
    e_h = 1.0 - a + a**2 / 2 - a**3 / 6 + a**4 / 24
    q_h = h * (1.0 - a / 2 + a**2 / 6 - a**3 / 24)
    return e_h, q_h


# ---------------------------------------------------------------------------
# Transcription structure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _AbsTerm:
    """|theta_vertex_k - theta_bar_k| as either a fixed-sign linear expression
    or a dedicated bound variable."""

    vertex: int
    comp: int
    sign: float       # +1: th_bar - th_v; -1: th_v - th_bar; 0: beta variable
    beta_index: int = -1


@dataclass
class OCPStructure:
    """Index bookkeeping for the flattened decision vector."""

    sys: UncertainSystem
    ccm: CCM
    consts: TubeConstants
    cfg: MPCConfig
    ref: ReferenceMap
    Theta: Polytope
    x_t: Array
    mode: str                      # 'homothetic' | 'rigid'
    th_verts: Array
    d_verts: Array
    abs_terms: list[_AbsTerm]
    n_beta: int
    K: int                         # total substeps = N * substeps
    nvar: int
    off_z: int
    off_v: int
    off_delta: int
    off_theta: int
    off_df: int
    off_wbar: int
    off_beta: int
    off_geo: int
    rigid_delta: float = 0.0
    row_labels: list[str] = field(default_factory=list)
    row_geo: int = -1

    def z_sl(self, k):
        n = self.sys.n
        return slice(self.off_z + k * n, self.off_z + (k + 1) * n)

    def v_sl(self, i):
        m = self.sys.m
        return slice(self.off_v + i * m, self.off_v + (i + 1) * m)

    def d_ix(self, k):
        return self.off_delta + k

    def geo_sl(self, j):
        # interior geodesic node j (0-based among interior nodes)
        n = self.sys.n
        return slice(self.off_geo + j * n, self.off_geo + (j + 1) * n)

    def unpack(self, x: Array) -> "MPCSolution":
        n, m = self.sys.n, self.sys.m
        N = self.cfg.N
        K = self.K
        z = x[self.off_z:self.off_z + (K + 1) * n].reshape(K + 1, n)
        v = x[self.off_v:self.off_v + N * m].reshape(N, m)
        th = x[self.off_theta:self.off_theta + self.sys.p]
        if self.mode == "rigid":
            delta = np.full(K + 1, self.rigid_delta)
            df = self.rigid_delta
            wbar = np.zeros(N)
        else:
            delta = x[self.off_delta:self.off_delta + K + 1].copy()
            df = float(x[self.off_df])
            wbar = x[self.off_wbar:self.off_wbar + N].copy()
        D = self.cfg.geodesic_degree
        geo = np.vstack([z[0][None, :],
                         x[self.off_geo:self.off_geo + (D - 1) * n].reshape(D - 1, n),
                         self.x_t[None, :]])
        return MPCSolution(z=z, v=v, delta=delta, theta_bar=th.copy(),
                           delta_f_bar=df, w_bar=wbar, geo=geo,
                           cost=np.nan, status="candidate", raw=x.copy())


@dataclass
class MPCSolution:
    z: Array
    v: Array
    delta: Array
    theta_bar: Array
    delta_f_bar: float
    w_bar: Array
    geo: Array
    cost: float
    status: str
    raw: Array
    solve_time: float = 0.0
    kkt_residual: float = np.nan
    feasibility: float = np.nan

    def to_json(self) -> dict:
        return {"z": self.z.tolist(), "v": self.v.tolist(),
                "delta": self.delta.tolist(),
                "theta_bar": self.theta_bar.tolist(),
                "delta_f_bar": self.delta_f_bar,
                "w_bar": self.w_bar.tolist(), "geo": self.geo.tolist(),
                "cost": self.cost, "status": self.status,
                "solve_time": self.solve_time,
                "feasibility": self.feasibility}


def _classify_abs_terms(Theta: Polytope, Theta0: Polytope, tol=1e-12):
    """Fix |[th^i - th_bar]_k| signs where the vertex sits outside th_bar's
    attainable interval; otherwise allocate a bound variable."""
    verts = Theta.vertices()
    lo, hi = Theta0.interval_hull()
    terms = []
    n_beta = 0
    for a, th in enumerate(verts):
        for k in range(verts.shape[1]):
            if th[k] <= lo[k] + tol:
                terms.append(_AbsTerm(a, k, +1.0))
            elif th[k] >= hi[k] - tol:
                terms.append(_AbsTerm(a, k, -1.0))
            else:
                terms.append(_AbsTerm(a, k, 0.0, n_beta))
                n_beta += 1
    return verts, terms, n_beta


# ---------------------------------------------------------------------------
# OCP build
# ---------------------------------------------------------------------------

def build_ocp(sys: UncertainSystem, ccm: CCM, consts: TubeConstants,
              x_t, Theta_t: Polytope, cfg: MPCConfig, ref: ReferenceMap,
              mode: str = "homothetic", rigid_delta: float = 0.0,
              warm: Array | None = None) -> tuple[NLPProblem, OCPStructure]:
    """Assemble the finite-horizon program as a dense smooth NLP."""
    x_t = np.asarray(x_t, float)
    n, m, p = sys.n, sys.m, sys.p
    N, s = cfg.N, cfg.substeps
    K = N * s
    D = cfg.geodesic_degree
    lam = consts.rho_c - consts.L_D
    if lam <= 0:
        raise OCPInfeasible(f"tube not contractive: rho_c - L_D = {lam:.4g}")
    h = cfg.T_s / s
    e_h, q_h = _delta_step_coeffs(lam, h)
    d_verts = sys.D.vertices()
    th_verts, abs_terms, n_beta = _classify_abs_terms(Theta_t, sys.Theta0)
    if mode == "rigid":
        n_beta = 0

    off_z = 0
    off_v = off_z + (K + 1) * n
    off_end = off_v + N * m
    if mode == "homothetic":
        off_delta = off_end
        off_theta = off_delta + (K + 1)
        off_df = off_theta + p
        off_wbar = off_df + 1
        off_beta = off_wbar + N
        off_geo = off_beta + n_beta
    else:
        off_delta = -1
        off_theta = off_end
        off_df = -1
        off_wbar = -1
        off_beta = -1
        off_geo = off_theta + p
    nvar = off_geo + (D - 1) * n

    st = OCPStructure(sys=sys, ccm=ccm, consts=consts, cfg=cfg, ref=ref,
                      Theta=Theta_t, x_t=x_t, mode=mode, th_verts=th_verts,
                      d_verts=d_verts, abs_terms=abs_terms, n_beta=n_beta,
                      K=K, nvar=nvar, off_z=off_z, off_v=off_v,
                      off_delta=off_delta, off_theta=off_theta, off_df=off_df,
                      off_wbar=off_wbar, off_beta=off_beta, off_geo=off_geo,
                      rigid_delta=rigid_delta)

    eps2 = cfg.norm_eps ** 2
    L_G = consts.L_G
    cj = consts.c
    A0, b0 = sys.Theta0.A, sys.Theta0.b

    def abs_value_and_grad(term: _AbsTerm, th, x):
        """(value, dval/dtheta_bar (p,), beta_index or -1)."""
        tv = th_verts[term.vertex][term.comp]
        if term.sign > 0:
            gr = np.zeros(p)
            gr[term.comp] = 1.0
            return th[term.comp] - tv, gr, -1
        if term.sign < 0:
            gr = np.zeros(p)
            gr[term.comp] = -1.0
            return tv - th[term.comp], gr, -1
        bi = st.off_beta + term.beta_index
        return float(x[bi]), None, bi

    def node_data(z, vv):
        """Metric and field sensitivities reused across vertex pairs."""
        hfd = 1e-6
        M = eval_metric(ccm, z)
        dW = ccm.eval_dW(z)
        dM = [-M @ dW[i] @ M for i in range(n)]
        G = sys.G(z, vv)
        E = sys.E(z)
        dG_dz, dE_dz = [], []
        for i in range(n):
            dz = np.zeros(n)
            dz[i] = hfd
            dG_dz.append((sys.G(z + dz, vv) - sys.G(z - dz, vv)) / (2 * hfd))
            dE_dz.append((sys.E(z + dz) - sys.E(z - dz)) / (2 * hfd))
        dG_dv = []
        for i in range(m):
            du = np.zeros(m)
            du[i] = hfd
            dG_dv.append((sys.G(z, vv + du) - sys.G(z, vv - du)) / (2 * hfd))
        return M, dM, G, E, dG_dz, dE_dz, dG_dv

    def mismatch_eps(nd, dtheta, dvec):
        """Smoothed mismatch norm and gradients wrt (z, v, dtheta direct)."""
        M, dM, G, E, dG_dz, dE_dz, dG_dv = nd
        eta = G @ dtheta + E @ dvec
        val = float(np.sqrt(eta @ M @ eta + eps2))
        Meta = M @ eta
        gz = np.empty(n)
        for i in range(n):
            gz[i] = float(eta @ dM[i] @ eta) \
                + 2.0 * float(Meta @ (dG_dz[i] @ dtheta + dE_dz[i] @ dvec))
        gz /= (2.0 * val)
        gv = np.empty(m)
        for i in range(m):
            gv[i] = float(Meta @ (dG_dv[i] @ dtheta)) / val
        gdth = (G.T @ Meta) / val
        return val, gz, gv, gdth

    # ---------------- objective ----------------
    def objective(x):
        th = x[off_theta:off_theta + p]
        total = 0.0
        grad = np.zeros(nvar)
        for k in range(K):
            i = k // s
            z = x[st.z_sl(k)]
            vv = x[st.v_sl(i)]
            (_, _, _, _, q, qz, qv, qth) = _rk4_sens(sys, z, vv, th, h, ref,
                                                     cfg.Q, cfg.R)
            total += q
            grad[st.z_sl(k)] += qz
            grad[st.v_sl(i)] += qv
            grad[off_theta:off_theta + p] += qth
        return total, grad

    # ---------------- equalities ----------------
    pin = cfg.pin_initial_state
    n_pin = (n + (1 if mode == "homothetic" else 0) + (D - 1) * n) if pin else 0
    n_eq = K * n + (K if mode == "homothetic" else 0) + n + n_pin

    def eq_constraints(x):
        th = x[off_theta:off_theta + p]
        c = np.zeros(n_eq)
        J = np.zeros((n_eq, nvar))
        row = 0
        if pin:
            r = slice(row, row + n)
            c[r] = x[st.z_sl(0)] - x_t
            J[r, st.z_sl(0)] = np.eye(n)
            row += n
            if mode == "homothetic":
                c[row] = x[st.d_ix(0)]
                J[row, st.d_ix(0)] = 1.0
                row += 1
            for jj in range(D - 1):
                r = slice(row, row + n)
                c[r] = x[st.geo_sl(jj)] - x_t
                J[r, st.geo_sl(jj)] = np.eye(n)
                row += n
        for k in range(K):
            i = k // s
            z = x[st.z_sl(k)]
            vv = x[st.v_sl(i)]
            z_next, Pz, Pv, Pth, *_ = _rk4_sens(sys, z, vv, th, h, ref,
                                                cfg.Q, cfg.R)
            r = slice(row, row + n)
            c[r] = x[st.z_sl(k + 1)] - z_next
            J[r, st.z_sl(k + 1)] = np.eye(n)
            J[r, st.z_sl(k)] = -Pz
            J[r, st.v_sl(i)] = -Pv
            J[r, off_theta:off_theta + p] = -Pth
            row += n
        if mode == "homothetic":
            for k in range(K):
                i = k // s
                c[row] = x[st.d_ix(k + 1)] - e_h * x[st.d_ix(k)] - q_h * x[st.off_wbar + i]
                J[row, st.d_ix(k + 1)] = 1.0
                J[row, st.d_ix(k)] = -e_h
                J[row, st.off_wbar + i] = -q_h
                row += 1
        zr = ref.z_ref(th)
        dzr = ref.dz_dtheta(th)
        r = slice(row, row + n)
        c[r] = x[st.z_sl(K)] - zr
        J[r, st.z_sl(K)] = np.eye(n)
        J[r, off_theta:off_theta + p] = -dzr
        return c, J

    # ---------------- inequalities ----------------
    def ineq_constraints(x):
        th = x[off_theta:off_theta + p]
        Jd: dict[int, dict[int, float]] = {}
        crows: list[float] = []
        record_labels = not st.row_labels

        def new_row(label):
            crows.append(0.0)
            Jd[len(crows) - 1] = {}
            if record_labels:
                st.row_labels.append(label)
            return len(crows) - 1

        def add(r, idx, val):
            if isinstance(idx, slice):
                start = idx.start
                vals = np.atleast_1d(val)
                for o, vv in enumerate(vals):
                    if vv != 0.0:
                        Jd[r][start + o] = Jd[r].get(start + o, 0.0) + float(vv)
            else:
                Jd[r][idx] = Jd[r].get(idx, 0.0) + float(val)

        thsl = slice(off_theta, off_theta + p)

        if mode == "homothetic":
            # (i) w_bar vertex bounds at interval start nodes
            for i in range(N):
                k = i * s
                z = x[st.z_sl(k)]
                vv = x[st.v_sl(i)]
                dlt = x[st.d_ix(k)]
                nd = node_data(z, vv)
                for a in range(th_verts.shape[0]):
                    dtheta = th_verts[a] - th
                    for b in range(d_verts.shape[0]):
                        val, gz, gv, gdth = mismatch_eps(nd, dtheta, d_verts[b])
                        r = new_row(f"wbar[{i}]v{a}d{b}")
                        tot = val
                        add(r, st.z_sl(k), gz)
                        add(r, st.v_sl(i), gv)
                        add(r, thsl, -gdth)
                        for t in abs_terms:
                            if t.vertex != a or L_G[t.comp] == 0.0:
                                continue
                            av, agr, bi = abs_value_and_grad(t, th, x)
                            tot += L_G[t.comp] * av * dlt
                            add(r, st.d_ix(k), L_G[t.comp] * av)
                            if bi >= 0:
                                add(r, bi, L_G[t.comp] * dlt)
                            else:
                                add(r, thsl, L_G[t.comp] * dlt * agr)
                        tot -= x[st.off_wbar + i]
                        add(r, st.off_wbar + i, -1.0)
                        crows[r] = tot
                r = new_row(f"wbar[{i}]>=0")
                crows[r] = -x[st.off_wbar + i]
                add(r, st.off_wbar + i, -1.0)
            # beta splits
            for t in abs_terms:
                if t.sign == 0.0:
                    bi = st.off_beta + t.beta_index
                    tv = th_verts[t.vertex][t.comp]
                    r = new_row(f"beta[{t.beta_index}]lo")
                    crows[r] = (tv - th[t.comp]) - x[bi]
                    add(r, off_theta + t.comp, -1.0)
                    add(r, bi, -1.0)
                    r = new_row(f"beta[{t.beta_index}]hi")
                    crows[r] = (th[t.comp] - tv) - x[bi]
                    add(r, off_theta + t.comp, 1.0)
                    add(r, bi, -1.0)
            # delta >= 0 at all nodes
            for k in range(K + 1):
                r = new_row(f"delta[{k}]>=0")
                crows[r] = -x[st.d_ix(k)]
                add(r, st.d_ix(k), -1.0)

        # (ii) tightened constraints at enforcement nodes
        enforce = range(K + 1) if cfg.enforce_substeps else range(0, K + 1, s)
        for k in enforce:
            i = min(k // s, N - 1)
            z = x[st.z_sl(k)]
            vv = x[st.v_sl(i)]
            dlt = x[st.d_ix(k)] if mode == "homothetic" else rigid_delta
            for j, hj in enumerate(sys.constraints):
                r = new_row(f"tight[{k}]h{j}")
                crows[r] = hj.value(z, vv) + cj[j] * dlt
                add(r, st.z_sl(k), hj.grad_x(z, vv))
                add(r, st.v_sl(i), hj.grad_u(z, vv))
                if mode == "homothetic":
                    add(r, st.d_ix(k), cj[j])

        # (iii) theta_bar in Theta0
        for irow in range(A0.shape[0]):
            r = new_row(f"theta0[{irow}]")
            crows[r] = float(A0[irow] @ th - b0[irow])
            add(r, thsl, A0[irow])

        # (iv) initial-state tube membership E(curve) <= delta_0^2
        if not pin:
            Vg = np.vstack([x[st.z_sl(0)][None, :],
                            x[off_geo:off_geo + (D - 1) * n].reshape(D - 1, n),
                            x_t[None, :]])
            Eg, dEg = curve_energy(ccm, Vg)
            r = new_row("geodesic")
            if record_labels:
                st.row_geo = r
            if mode == "homothetic":
                d0 = x[st.d_ix(0)]
                crows[r] = Eg - d0 ** 2
                add(r, st.d_ix(0), -2.0 * d0)
            else:
                crows[r] = Eg - rigid_delta ** 2
            add(r, st.z_sl(0), dEg[0])
            for jj in range(D - 1):
                add(r, st.geo_sl(jj), dEg[1 + jj])

        # (v) terminal ingredients
        zr = ref.z_ref(th)
        vr = ref.v_ref(th)
        dzr = ref.dz_dtheta(th)
        dvr = ref.dv_dtheta(th)
        if mode == "homothetic":
            df = x[off_df]
            r = new_row("deltaK<=df")
            crows[r] = x[st.d_ix(K)] - df
            add(r, st.d_ix(K), 1.0)
            add(r, off_df, -1.0)
            r = new_row("df>=0")
            crows[r] = -df
            add(r, off_df, -1.0)
            # f_delta(df, z_ref, v_ref, Theta, th) <= 0, per vertex pair
            nd_ref = node_data(zr, vr)
            for a in range(th_verts.shape[0]):
                dtheta = th_verts[a] - th
                for b in range(d_verts.shape[0]):
                    val, gz, gv, gdth = mismatch_eps(nd_ref, dtheta, d_verts[b])
                    r = new_row(f"term_fd_v{a}d{b}")
                    tot = -lam * df + val
                    add(r, off_df, -lam)
                    add(r, thsl, gz @ dzr + gv @ dvr - gdth)
                    for t in abs_terms:
                        if t.vertex != a or L_G[t.comp] == 0.0:
                            continue
                        av, agr, bi = abs_value_and_grad(t, th, x)
                        tot += L_G[t.comp] * av * df
                        add(r, off_df, L_G[t.comp] * av)
                        if bi >= 0:
                            add(r, bi, L_G[t.comp] * df)
                        else:
                            add(r, thsl, L_G[t.comp] * df * agr)
                    crows[r] = tot
            # terminal tightened constraints
            for j, hj in enumerate(sys.constraints):
                r = new_row(f"term_tight_h{j}")
                crows[r] = hj.value(zr, vr) + cj[j] * df
                add(r, thsl, hj.grad_x(zr, vr) @ dzr + hj.grad_u(zr, vr) @ dvr)
                add(r, off_df, cj[j])
        else:
            for j, hj in enumerate(sys.constraints):
                r = new_row(f"term_tight_h{j}")
                crows[r] = hj.value(zr, vr) + cj[j] * rigid_delta
                add(r, thsl, hj.grad_x(zr, vr) @ dzr + hj.grad_u(zr, vr) @ dvr)

        c = np.array(crows)
        J = np.zeros((len(crows), nvar))
        for r, cols in Jd.items():
            for ci, vv in cols.items():
                J[r, ci] = vv
        return c, J

    # ---------------- Hessian (tracking cost + energy-row curvature) --------
    from .geodesics import curve_basis

    def hessian(x, y=None, zmul=None):
        H = np.zeros((nvar, nvar))
        th = x[off_theta:off_theta + p]
        wz = 2.0 * cfg.T_s / s
        for k in range(K):
            H[st.z_sl(k), st.z_sl(k)] += wz * cfg.Q
        for i in range(N):
            H[st.v_sl(i), st.v_sl(i)] += 2.0 * cfg.T_s * cfg.R
        dzr = ref.dz_dtheta(th)
        dvr = ref.dv_dtheta(th)
        Tf = cfg.N * cfg.T_s
        Hth = 2.0 * Tf * (dzr.T @ cfg.Q @ dzr + dvr.T @ cfg.R @ dvr)
        H[off_theta:off_theta + p, off_theta:off_theta + p] += Hth + 1e-6 * np.eye(p)
        if pin:
            H += 1e-6 * np.eye(nvar)
            return H
        # Gauss-Newton curvature of the geodesic-energy constraint; without it
        # the QP model is blind to the quadratic growth of E near short curves.
        # Weight: active multiplier estimate, boosted while the row is violated.
        _, wq, Phi, Psi = curve_basis(D)
        Vg = np.vstack([x[st.z_sl(0)][None, :],
                        x[off_geo:off_geo + (D - 1) * n].reshape(D - 1, n),
                        x_t[None, :]])
        Y = Phi @ Vg
        lam_geo = 1e-3
        if zmul is not None and 0 <= st.row_geo < zmul.size:
            lam_geo = max(lam_geo, float(zmul[st.row_geo]))
        Eg, _ = curve_energy(ccm, Vg, with_grad=False)
        d0_cur = x[st.d_ix(0)] if mode == "homothetic" else rigid_delta
        viol = max(0.0, Eg - d0_cur ** 2)
        ramp = viol / (viol + 0.01 * max(d0_cur ** 2, 1e-4))
        lam_geo = max(lam_geo, 10.0 * ramp)
        var_rows = [st.z_sl(0)] + [st.geo_sl(jj) for jj in range(D - 1)]
        for qi in range(len(wq)):
            Mq = eval_metric(ccm, Y[qi])
            for ia, sla_ in enumerate(var_rows):
                for ib, slb in enumerate(var_rows):
                    coef = 2.0 * lam_geo * wq[qi] * Psi[qi, ia] * Psi[qi, ib]
                    if coef != 0.0:
                        H[sla_, slb] += coef * Mq
        if mode == "homothetic":
            H[st.d_ix(0), st.d_ix(0)] += 2.0 * lam_geo
        H += 1e-6 * np.eye(nvar)
        return H

    # ---------------- value-only paths for line-search trials ---------------
    def abs_value(term: _AbsTerm, th, x):
        tv = th_verts[term.vertex][term.comp]
        if term.sign > 0:
            return th[term.comp] - tv
        if term.sign < 0:
            return tv - th[term.comp]
        return float(x[st.off_beta + term.beta_index])

    def mismatch_val(M, G, E, dtheta, dvec):
        eta = G @ dtheta + E @ dvec
        return float(np.sqrt(eta @ M @ eta + eps2))

    def obj_value(x):
        th = x[off_theta:off_theta + p]
        total = 0.0
        for k in range(K):
            total += _rk4_plain(sys, x[st.z_sl(k)], x[st.v_sl(k // s)], th, h,
                                ref, cfg.Q, cfg.R)[1]
        return total

    def eq_values(x):
        th = x[off_theta:off_theta + p]
        out = []
        if pin:
            out.append(x[st.z_sl(0)] - x_t)
            if mode == "homothetic":
                out.append(np.array([x[st.d_ix(0)]]))
            for jj in range(D - 1):
                out.append(x[st.geo_sl(jj)] - x_t)
        for k in range(K):
            z_next, _ = _rk4_plain(sys, x[st.z_sl(k)], x[st.v_sl(k // s)], th,
                                   h, ref, cfg.Q, cfg.R)
            out.append(x[st.z_sl(k + 1)] - z_next)
        if mode == "homothetic":
            dd = np.empty(K)
            for k in range(K):
                dd[k] = (x[st.d_ix(k + 1)] - e_h * x[st.d_ix(k)]
                         - q_h * x[st.off_wbar + k // s])
            out.append(dd)
        out.append(x[st.z_sl(K)] - ref.z_ref(th))
        return np.concatenate(out)

    def ineq_values(x):
        th = x[off_theta:off_theta + p]
        out = []
        if mode == "homothetic":
            for i in range(N):
                k = i * s
                z = x[st.z_sl(k)]
                vv = x[st.v_sl(i)]
                dlt = x[st.d_ix(k)]
                M = eval_metric(ccm, z)
                G = sys.G(z, vv)
                E = sys.E(z)
                for a in range(th_verts.shape[0]):
                    dtheta = th_verts[a] - th
                    grow = sum(L_G[t.comp] * abs_value(t, th, x) * dlt
                               for t in abs_terms
                               if t.vertex == a and L_G[t.comp] != 0.0)
                    for b in range(d_verts.shape[0]):
                        out.append(mismatch_val(M, G, E, dtheta, d_verts[b])
                                   + grow - x[st.off_wbar + i])
                out.append(-x[st.off_wbar + i])
            for t in abs_terms:
                if t.sign == 0.0:
                    bi = st.off_beta + t.beta_index
                    tv = th_verts[t.vertex][t.comp]
                    out.append((tv - th[t.comp]) - x[bi])
                    out.append((th[t.comp] - tv) - x[bi])
            for k in range(K + 1):
                out.append(-x[st.d_ix(k)])
        enforce = range(K + 1) if cfg.enforce_substeps else range(0, K + 1, s)
        for k in enforce:
            i = min(k // s, N - 1)
            z = x[st.z_sl(k)]
            vv = x[st.v_sl(i)]
            dlt = x[st.d_ix(k)] if mode == "homothetic" else rigid_delta
            for j, hj in enumerate(sys.constraints):
                out.append(hj.value(z, vv) + cj[j] * dlt)
        for irow in range(A0.shape[0]):
            out.append(float(A0[irow] @ th - b0[irow]))
        if not pin:
            Vg = np.vstack([x[st.z_sl(0)][None, :],
                            x[off_geo:off_geo + (D - 1) * n].reshape(D - 1, n),
                            x_t[None, :]])
            Eg, _ = curve_energy(ccm, Vg, with_grad=False)
            d0 = x[st.d_ix(0)] if mode == "homothetic" else rigid_delta
            out.append(Eg - d0 ** 2)
        zr = ref.z_ref(th)
        vr = ref.v_ref(th)
        if mode == "homothetic":
            df = x[off_df]
            out.append(x[st.d_ix(K)] - df)
            out.append(-df)
            Mr = eval_metric(ccm, zr)
            Gr = sys.G(zr, vr)
            Er = sys.E(zr)
            for a in range(th_verts.shape[0]):
                dtheta = th_verts[a] - th
                grow = sum(L_G[t.comp] * abs_value(t, th, x) * df
                           for t in abs_terms
                           if t.vertex == a and L_G[t.comp] != 0.0)
                for b in range(d_verts.shape[0]):
                    out.append(-lam * df + grow
                               + mismatch_val(Mr, Gr, Er, dtheta, d_verts[b]))
            for j, hj in enumerate(sys.constraints):
                out.append(hj.value(zr, vr) + cj[j] * df)
        else:
            for j, hj in enumerate(sys.constraints):
                out.append(hj.value(zr, vr) + cj[j] * rigid_delta)
        return np.array([float(v) for v in np.concatenate(
            [np.atleast_1d(o) for o in out])])

    x0 = warm if warm is not None else default_initial_guess(st)
    prob = NLPProblem(n=nvar, objective=objective, eq_constraints=eq_constraints,
                      ineq_constraints=ineq_constraints, x0=x0, hessian=hessian,
                      obj_value=obj_value, eq_values=eq_values,
                      ineq_values=ineq_values)
    return prob, st


def default_initial_guess(st: OCPStructure, z_path: Array | None = None) -> Array:
    """Warm start: interpolate x_t toward the reference, hold v_ref, integrate
    the tube from the geodesic bound."""
    sys, cfg = st.sys, st.cfg
    n, p = sys.n, sys.p
    K = st.K
    lo, hi = sys.Theta0.interval_hull()
    th = 0.5 * (lo + hi)
    zr = st.ref.z_ref(th)
    vr = st.ref.v_ref(th)
    x = np.zeros(st.nvar)
    if z_path is None:
        frac = np.linspace(0.0, 1.0, K + 1)
        z_path = st.x_t[None, :] + frac[:, None] * (zr - st.x_t)[None, :]
    for k in range(K + 1):
        x[st.z_sl(k)] = z_path[k]
    for i in range(cfg.N):
        x[st.v_sl(i)] = vr
    x[st.off_theta:st.off_theta + p] = th
    D = cfg.geodesic_degree
    sgl = cgl_nodes(D)
    for j in range(D - 1):
        x[st.geo_sl(j)] = z_path[0] + sgl[1 + j] * (st.x_t - z_path[0])
    if st.mode == "homothetic":
        lam = st.consts.rho_c - st.consts.L_D
        e_h, q_h = _delta_step_coeffs(lam, cfg.T_s / cfg.substeps)
        if cfg.pin_initial_state:
            x[st.d_ix(0)] = 0.0
        else:
            Vg = np.vstack([z_path[0][None, :],
                            x[st.off_geo:st.off_geo + (D - 1) * n].reshape(D - 1, n),
                            st.x_t[None, :]])
            E0, _ = curve_energy(st.ccm, Vg, with_grad=False)
            x[st.d_ix(0)] = max(float(np.sqrt(max(E0, 0.0))), 1e-3)
        for k in range(K):
            i = k // cfg.substeps
            z = x[st.z_sl(k)]
            vv = x[st.v_sl(i)]
            if k % cfg.substeps == 0:
                req = max(
                    w_bar_requirement(st.consts, st.ccm, sys, x[st.d_ix(k)],
                                      z, vv, tv, dv, th)
                    for tv in st.th_verts for dv in st.d_verts)
                x[st.off_wbar + i] = req + 1e-9
            x[st.d_ix(k + 1)] = e_h * x[st.d_ix(k)] + q_h * x[st.off_wbar + i]
        dK = x[st.d_ix(K)]
        x[st.off_df] = max(dK, 1e-6)
        for t in st.abs_terms:
            if t.sign == 0.0:
                x[st.off_beta + t.beta_index] = abs(st.th_verts[t.vertex][t.comp]
                                                    - th[t.comp])
    return x


# ---------------------------------------------------------------------------
# Solve wrappers
# ---------------------------------------------------------------------------

def path_guess(st: OCPStructure, waypoints) -> Array:
    """Initial guess threading the horizon through a waypoint list (resampled
    piecewise-linearly; trailing state components default to zero)."""
    pts = np.atleast_2d(np.asarray(waypoints, float))
    K = st.K
    n = st.sys.n
    z_path = np.zeros((K + 1, n))
    segs = np.linspace(0, len(pts) - 1, K + 1)
    for k, sgk in enumerate(segs):
        i0 = min(int(np.floor(sgk)), max(len(pts) - 2, 0))
        frac = sgk - i0
        a = pts[i0]
        b = pts[min(i0 + 1, len(pts) - 1)]
        z_path[k, :a.size] = (1 - frac) * a + frac * b
    return default_initial_guess(st, z_path=z_path)


def solve_ocp(prob: NLPProblem, st: OCPStructure,
              warm: MPCSolution | None = None,
              extra_guesses: Sequence[Array] = ()) -> MPCSolution:
    """Solve the transcribed program, optionally multi-started.

    Picks the best feasible result across starts; reports discrepancies
    between local optima via the returned solution's status suffix.
    """
    guesses: list[Array] = []
    if warm is not None:
        if warm.raw.shape[0] != prob.n:
            raise ValueError("warm start dimension mismatch")
        guesses.append(warm.raw)
    else:
        guesses.append(prob.x0)
    guesses.extend(extra_guesses)
    best: tuple[float, SQPResult] | None = None
    costs = []
    res = None
    for g0 in guesses:
        t0 = time.perf_counter()
        res = solve_nlp(
            NLPProblem(n=prob.n, objective=prob.objective,
                       eq_constraints=prob.eq_constraints,
                       ineq_constraints=prob.ineq_constraints, x0=g0,
                       hessian=prob.hessian, lb=prob.lb, ub=prob.ub),
            st.cfg.solver)
        res.solve_time = time.perf_counter() - t0
        if res.feasibility <= 1e-6:
            costs.append(res.fun)
            if best is None or res.fun < best[0]:
                best = (res.fun, res)
    if best is None:
        # return the last attempt's diagnosis
        sol_stat = res.status if res.status in ("infeasible", "max_iter") else "infeasible"
        out = st.unpack(res.x)
        out.cost = res.fun
        out.status = sol_stat
        out.solve_time = getattr(res, "solve_time", 0.0)
        out.kkt_residual = res.kkt_residual
        out.feasibility = res.feasibility
        return out
    res = best[1]
    out = st.unpack(res.x)
    out.cost = res.fun
    out.status = "optimal" if res.status == "optimal" else res.status
    out.solve_time = getattr(res, "solve_time", 0.0)
    out.kkt_residual = res.kkt_residual
    out.feasibility = res.feasibility
    if len(costs) > 1 and (max(costs) - min(costs)) > 1e-6 * max(1.0, abs(min(costs))):
        out.status += "+multistart-spread"
    return out


def check_feasibility(prob: NLPProblem, x: Array) -> float:
    """Max constraint violation of a candidate point."""
    c_eq, _ = prob.eval_eq(x)
    c_in, _ = prob.eval_in(x)
    v = 0.0
    if c_eq.size:
        v = max(v, float(np.max(np.abs(c_eq))))
    if c_in.size:
        v = max(v, float(np.max(c_in, initial=0.0)))
    return v


def shift_candidate(prev: MPCSolution, sys: UncertainSystem, ccm: CCM,
                    consts: TubeConstants, Theta_new: Polytope, cfg: MPCConfig,
                    ref: ReferenceMap, x_new,
                    geo_opts: GeodesicOptions | None = None) -> MPCSolution:
    """Shifted candidate used as recursive-feasibility certificate and warm
    start: inputs shift by one interval with the terminal input appended; the
    tube restarts from the measured incremental distance."""
    x_new = np.asarray(x_new, float)
    n, m, p = sys.n, sys.m, sys.p
    N, s = cfg.N, cfg.substeps
    K = N * s
    th = prev.theta_bar
    vr = ref.v_ref(th)
    v_new = np.vstack([prev.v[1:], vr[None, :]])
    z_new = np.empty_like(prev.z)
    z_new[:K + 1 - s] = prev.z[s:]
    h = cfg.T_s / s
    zz = z_new[K - s].copy()
    for k in range(K - s, K):
        zz = _rk4_sens(sys, zz, vr, th, h, ref, cfg.Q, cfg.R)[0]
        z_new[k + 1] = zz
    geo_opts = geo_opts or GeodesicOptions(degree=cfg.geodesic_degree)
    curve = solve_geodesic(ccm, x_new, z_new[0], geo_opts)
    d0 = float(np.sqrt(max(curve.energy, 0.0)))
    lam = consts.rho_c - consts.L_D
    e_h, q_h = _delta_step_coeffs(lam, h)
    delta = np.empty(K + 1)
    delta[0] = d0
    wbar = np.empty(N)
    th_verts = Theta_new.vertices()
    d_verts = sys.D.vertices()
    eps = cfg.norm_eps
    from .tube import mismatch_norm
    for i in range(N):
        k = i * s
        req = 0.0
        for tv in th_verts:
            dtheta = tv - th
            growth = float(consts.L_G @ np.abs(dtheta)) * delta[k]
            for dv in d_verts:
                mis = mismatch_norm(ccm, sys, z_new[k], v_new[i], dtheta, dv)
                # matches the smoothed norm used in the transcription
                req = max(req, growth + float(np.sqrt(mis ** 2 + eps ** 2)))
        wbar[i] = req
        for k2 in range(k, k + s):
            delta[k2 + 1] = e_h * delta[k2] + q_h * wbar[i]
    sol = MPCSolution(z=z_new, v=v_new, delta=delta, theta_bar=th.copy(),
                      delta_f_bar=prev.delta_f_bar, w_bar=wbar,
                      geo=curve.values.copy(), cost=np.nan,
                      status="candidate", raw=np.zeros(0))
    return sol


def pack_solution(st: OCPStructure, sol: MPCSolution) -> Array:
    """Flatten a structured solution into the decision layout of `st`."""
    x = np.zeros(st.nvar)
    K, N = st.K, st.cfg.N
    n, m, p = st.sys.n, st.sys.m, st.sys.p
    for k in range(K + 1):
        x[st.z_sl(k)] = sol.z[k]
    for i in range(N):
        x[st.v_sl(i)] = sol.v[i]
    x[st.off_theta:st.off_theta + p] = sol.theta_bar
    D = st.cfg.geodesic_degree
    for j in range(D - 1):
        x[st.geo_sl(j)] = sol.geo[1 + j]
    if st.mode == "homothetic":
        for k in range(K + 1):
            x[st.d_ix(k)] = sol.delta[k]
        x[st.off_df] = sol.delta_f_bar
        x[st.off_wbar:st.off_wbar + N] = sol.w_bar
        for t in st.abs_terms:
            if t.sign == 0.0:
                x[st.off_beta + t.beta_index] = abs(
                    st.th_verts[t.vertex][t.comp] - sol.theta_bar[t.comp])
    return x


def terminal_check(sys: UncertainSystem, ccm: CCM, consts: TubeConstants,
                   z, delta: float, theta_bar, Theta: Polytope,
                   delta_f_bar: float, ref: ReferenceMap,
                   tol: float = 1e-6) -> tuple[bool, dict]:
    """Membership test for the terminal set with residual report."""
    th = np.atleast_1d(np.asarray(theta_bar, float))
    zr = ref.z_ref(th)
    vr = ref.v_ref(th)
    res_z = float(np.max(np.abs(np.asarray(z, float) - zr)))
    res_delta = max(delta - delta_f_bar, -delta, 0.0) if delta_f_bar >= 0 else np.inf
    from .tube import f_delta as _fd
    fd = _fd(consts, ccm, sys, delta_f_bar, zr, vr, Theta, th)
    tight = sys.h(zr, vr) + consts.c * delta_f_bar
    ok = (res_z <= tol and delta >= -tol and delta <= delta_f_bar + tol
          and fd <= tol and np.all(tight <= tol))
    return bool(ok), {"z_residual": res_z, "delta": delta,
                      "delta_f_bar": delta_f_bar, "f_delta_at_df": fd,
                      "terminal_tightened_max": float(np.max(tight))}
