"""Dense SQP solver for smooth nonlinear programs.

Problems carry callbacks for the objective, equality and inequality
constraints, each returning values together with dense Jacobians. The solver
iterates quadratic subproblems (cvxopt's interior-point QP) with an L1
exact-penalty line search; when a subproblem's linearized constraints are
inconsistent it falls back to an elastic reformulation with slack variables.
Deterministic: identical inputs produce identical iterates.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from cvxopt import matrix, solvers

from .errors import TubeMPCError

solvers.options["show_progress"] = False

# exceptions treated as "trial point outside the model's domain" in line search
_EVAL_ERRORS = (TubeMPCError, np.linalg.LinAlgError, FloatingPointError)

Array = np.ndarray


@dataclass
class NLPProblem:
    """Smooth NLP: min f(x) s.t. c_eq(x) = 0, c_in(x) <= 0, lb <= x <= ub.

    `hessian(x, y, z)` may use the current multiplier estimates (y for
    equalities, z for inequalities, either may be None) to include constraint
    curvature; it must return a positive semidefinite matrix.
    """

    n: int
    objective: Callable[[Array], tuple[float, Array]]
    eq_constraints: Callable[[Array], tuple[Array, Array]] | None
    ineq_constraints: Callable[[Array], tuple[Array, Array]] | None
    x0: Array
    hessian: Callable[..., Array] | None = None
    lb: Array | None = None
    ub: Array | None = None
    # optional cheap value-only callbacks for line-search trials
    obj_value: Callable[[Array], float] | None = None
    eq_values: Callable[[Array], Array] | None = None
    ineq_values: Callable[[Array], Array] | None = None

    def eval_eq(self, x):
        if self.eq_constraints is None:
            return np.zeros(0), np.zeros((0, self.n))
        return self.eq_constraints(x)

    def eval_in(self, x):
        if self.ineq_constraints is None:
            return np.zeros(0), np.zeros((0, self.n))
        return self.ineq_constraints(x)

    def values(self, x):
        """(f, c_eq, c_in) without Jacobians, using cheap paths if given."""
        f = self.obj_value(x) if self.obj_value else self.objective(x)[0]
        if self.eq_values is not None:
            ce = self.eq_values(x)
        else:
            ce = self.eval_eq(x)[0]
        if self.ineq_values is not None:
            ci = self.ineq_values(x)
        else:
            ci = self.eval_in(x)[0]
        return f, ce, ci


@dataclass
class SQPOptions:
    max_iter: int = 80
    tol_kkt: float = 1e-6
    tol_feas: float = 1e-8
    tol_step: float = 1e-12
    penalty0: float = 10.0
    reg: float = 1e-8
    max_ls: int = 30
    tr_init: float = 1e3      # trust-region radius on the step, inf-norm
    tr_min: float = 1e-10
    tr_max: float = 1e6
    verbose: bool = False


@dataclass
class SQPResult:
    x: Array
    fun: float
    status: str                     # optimal | max_iter | infeasible | stalled
    kkt_residual: float
    feasibility: float
    iterations: int
    multipliers_eq: Array
    multipliers_in: Array
    log: list[dict] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == "optimal"

    def write_log_csv(self, path: str):
        if not self.log:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.log[0].keys()))
            writer.writeheader()
            writer.writerows(self.log)


def _feasibility(c_eq, c_in) -> float:
    v = 0.0
    if c_eq.size:
        v = max(v, float(np.max(np.abs(c_eq))))
    if c_in.size:
        v = max(v, float(np.max(c_in, initial=0.0)))
    return v


def _merit(f, c_eq, c_in, mu) -> float:
    pen = 0.0
    if c_eq.size:
        pen += float(np.sum(np.abs(c_eq)))
    if c_in.size:
        pen += float(np.sum(np.maximum(c_in, 0.0)))
    return f + mu * pen


def _solve_qp(H, g, J_eq, c_eq, J_in, c_in, d_lo, d_hi):
    """min 1/2 d'Hd + g'd s.t. J_eq d = -c_eq, J_in d <= -c_in, bounds on d."""
    n = H.shape[0]
    G_rows = [J_in] if J_in.size else []
    h_rows = [-c_in] if J_in.size else []
    if d_lo is not None:
        G_rows.append(-np.eye(n))
        h_rows.append(-d_lo)
        G_rows.append(np.eye(n))
        h_rows.append(d_hi)
    Gm = np.vstack(G_rows) if G_rows else np.zeros((0, n))
    hv = np.concatenate(h_rows) if h_rows else np.zeros(0)
    kwargs = {}
    if c_eq.size:
        kwargs = {"A": matrix(J_eq), "b": matrix(-c_eq)}
    try:
        sol = solvers.qp(matrix(H), matrix(g), matrix(Gm), matrix(hv), **kwargs)
    except (ValueError, ArithmeticError):
        return None
    if sol["status"] != "optimal":
        return None
    d = np.array(sol["x"]).ravel()
    y = np.array(sol["y"]).ravel() if c_eq.size else np.zeros(0)
    z_all = np.array(sol["z"]).ravel() if hv.size else np.zeros(0)
    z = z_all[:J_in.shape[0]] if J_in.size else np.zeros(0)
    return d, y, z


def _solve_qp_elastic(H, g, J_eq, c_eq, J_in, c_in, d_lo, d_hi, mu_e):
    """Always-feasible L1 relaxation with slacks on every constraint row."""
    n = H.shape[0]
    neq, nin = c_eq.size, c_in.size
    N = n + 2 * neq + nin
    Hb = np.zeros((N, N))
    Hb[:n, :n] = H
    Hb[n:, n:] = 1e-10 * np.eye(2 * neq + nin)
    gb = np.concatenate([g, mu_e * np.ones(2 * neq + nin)])
    # equalities: J_eq d - s+ + s- = -c_eq
    A_rows, b_rows = [], []
    if neq:
        A = np.hstack([J_eq, -np.eye(neq), np.eye(neq), np.zeros((neq, nin))])
        A_rows.append(A)
        b_rows.append(-c_eq)
    G_rows, h_rows = [], []
    if nin:
        G_rows.append(np.hstack([J_in, np.zeros((nin, 2 * neq)), -np.eye(nin)]))
        h_rows.append(-c_in)
    slack_block = np.hstack([np.zeros((2 * neq + nin, n)), -np.eye(2 * neq + nin)])
    G_rows.append(slack_block)
    h_rows.append(np.zeros(2 * neq + nin))
    if d_lo is not None:
        pad = np.zeros((n, 2 * neq + nin))
        G_rows.append(np.hstack([-np.eye(n), pad]))
        h_rows.append(-d_lo)
        G_rows.append(np.hstack([np.eye(n), pad]))
        h_rows.append(d_hi)
    Gm = np.vstack(G_rows)
    hv = np.concatenate(h_rows)
    kwargs = {}
    if neq:
        kwargs = {"A": matrix(np.vstack(A_rows)), "b": matrix(np.concatenate(b_rows))}
    try:
        sol = solvers.qp(matrix(Hb), matrix(gb), matrix(Gm), matrix(hv), **kwargs)
    except (ValueError, ArithmeticError):
        return None
    if sol["status"] != "optimal":
        return None
    xfull = np.array(sol["x"]).ravel()
    d = xfull[:n]
    slack_sum = float(np.sum(xfull[n:]))
    y = np.array(sol["y"]).ravel() if neq else np.zeros(0)
    z_all = np.array(sol["z"]).ravel()
    z = z_all[:nin] if nin else np.zeros(0)
    return d, y, z, slack_sum


def solve_nlp(problem: NLPProblem, opts: SQPOptions = SQPOptions()) -> SQPResult:
    """SQP with quasi-convex subproblems and exact-penalty globalization."""
    x = np.asarray(problem.x0, float).copy()
    n = problem.n
    mu = opts.penalty0
    f, g = problem.objective(x)
    c_eq, J_eq = problem.eval_eq(x)
    c_in, J_in = problem.eval_in(x)
    y = np.zeros(c_eq.size)
    z = np.zeros(c_in.size)
    log: list[dict] = []
    status = "max_iter"
    infeas_strikes = 0
    tiny_steps = 0
    it = 0
    radius = opts.tr_init
    for it in range(1, opts.max_iter + 1):
        if problem.hessian is not None:
            H = problem.hessian(x, y, z)
        else:
            H = np.eye(n)
        H = 0.5 * (H + H.T) + opts.reg * np.eye(n)
        lb = problem.lb if problem.lb is not None else -np.inf * np.ones(n)
        ub = problem.ub if problem.ub is not None else np.inf * np.ones(n)
        d_lo = np.maximum(lb - x, -radius)
        d_hi = np.minimum(ub - x, radius)
        qp = _solve_qp(H, g, J_eq, c_eq, J_in, c_in, d_lo, d_hi)
        slack_sum = 0.0
        used_elastic = False
        if qp is None:
            elastic = _solve_qp_elastic(H, g, J_eq, c_eq, J_in, c_in,
                                        d_lo, d_hi, mu_e=1e5)
            if elastic is None:
                status = "stalled"
                break
            d, y, z, slack_sum = elastic
            used_elastic = True
            if slack_sum > 1e-6:
                infeas_strikes += 1
                if float(np.max(np.abs(d), initial=0.0)) <= 1e-10:
                    # linearized least-infeasibility point is the current
                    # point: locally (affine case globally) infeasible
                    status = "infeasible"
                    break
            else:
                infeas_strikes = 0
        else:
            d, y, z = qp
            infeas_strikes = 0

        if not used_elastic:
            # elastic multipliers reflect the big-M penalty, not the problem
            lam_max = max(float(np.max(np.abs(y), initial=0.0)),
                          float(np.max(z, initial=0.0)))
            if mu < 1.1 * lam_max:
                mu = max(2.0 * mu, 1.2 * lam_max)

        feas0 = _feasibility(c_eq, c_in)
        phi0 = _merit(f, c_eq, c_in, mu)
        viol0 = (np.sum(np.abs(c_eq)) if c_eq.size else 0.0) + \
                (np.sum(np.maximum(c_in, 0.0)) if c_in.size else 0.0)
        dphi = float(g @ d) - mu * viol0
        alpha = 1.0
        accepted = False
        for _ in range(opts.max_ls):
            x_new = x + alpha * d
            try:
                f_new, ce_new, ci_new = problem.values(x_new)
            except _EVAL_ERRORS:
                alpha *= 0.5
                continue
            phi_new = _merit(f_new, ce_new, ci_new, mu)
            if phi_new <= phi0 + 1e-4 * alpha * min(dphi, 0.0) + 1e-14 * abs(phi0):
                accepted = True
                break
            alpha *= 0.5
        if accepted:
            # one full evaluation with Jacobians at the accepted point
            f_new, g_new = problem.objective(x_new)
            ce_new, Je_new = problem.eval_eq(x_new)
            ci_new, Ji_new = problem.eval_in(x_new)
        else:
            # merit could not decrease; treat tiny steps as convergence check
            x_new, f_new, g_new = x, f, g
            ce_new, Je_new, ci_new, Ji_new = c_eq, J_eq, c_in, J_in

        # adapt the trust region from line-search behavior
        if not accepted:
            radius = max(radius * 0.25, opts.tr_min)
        elif alpha < 0.25:
            radius = max(min(radius, float(np.max(np.abs(d)))) * 0.5, opts.tr_min)
        elif alpha == 1.0:
            radius = min(radius * 2.0, opts.tr_max)

        step = float(np.linalg.norm(alpha * d)) if accepted else 0.0
        f_prev = f
        x, f, g = x_new, f_new, g_new
        c_eq, J_eq, c_in, J_in = ce_new, Je_new, ci_new, Ji_new

        grad_lag = g.copy()
        if c_eq.size:
            grad_lag += J_eq.T @ y
        if c_in.size:
            grad_lag += J_in.T @ z
        kkt = float(np.max(np.abs(grad_lag))) / max(1.0, float(np.max(np.abs(g))))
        feas = _feasibility(c_eq, c_in)
        log.append({"iter": it, "f": f, "feas": feas, "kkt": kkt,
                    "step": step, "alpha": alpha, "mu": mu,
                    "elastic_slack": slack_sum})
        if opts.verbose:
            print(f"[sqp] it={it} f={f:.6g} feas={feas:.2e} kkt={kkt:.2e} "
                  f"alpha={alpha:.2g}")
        feasible_now = feas <= max(opts.tol_feas, 1e-6)
        if feasible_now and kkt <= opts.tol_kkt:
            status = "optimal"
            break
        # stationarity by stagnation: feasible, and either nothing left to gain
        # in the QP model or steps at numerical noise level
        if feasible_now and dphi >= -1e-9 * max(1.0, abs(f)):
            status = "optimal"
            break
        if accepted and feasible_now and \
                (step <= 1e-10 * (1.0 + float(np.linalg.norm(x)))
                 or abs(f - f_prev) <= 1e-11 * max(1.0, abs(f))):
            tiny_steps += 1
            if tiny_steps >= 3:
                status = "optimal"
                break
        else:
            tiny_steps = 0
        if infeas_strikes >= 5 and feas > 1e-6 and step <= opts.tol_step:
            status = "infeasible"
            break
        if not accepted:
            if feasible_now and kkt <= 10 * opts.tol_kkt:
                status = "optimal"
                break
            if radius <= 4 * opts.tr_min:
                # no progress possible at the smallest trust region
                status = "infeasible" if (feas > 1e-6 and infeas_strikes >= 2) \
                    else "stalled"
                break
            continue  # retry with the smaller radius
        if infeas_strikes >= 8:
            status = "infeasible"
            break
    feas = _feasibility(c_eq, c_in)
    return SQPResult(x=x, fun=f, status=status,
                     kkt_residual=log[-1]["kkt"] if log else np.inf,
                     feasibility=feas, iterations=it,
                     multipliers_eq=y, multipliers_in=z, log=log)


def check_gradients(problem: NLPProblem, x, h: float = 1e-6) -> dict[str, float]:
    """Relative error of analytic derivatives vs central differences at x."""
    x = np.asarray(x, float)
    n = problem.n
    _, g = problem.objective(x)
    c_eq, J_eq = problem.eval_eq(x)
    c_in, J_in = problem.eval_in(x)
    g_fd = np.zeros(n)
    Je_fd = np.zeros_like(J_eq)
    Ji_fd = np.zeros_like(J_in)
    for i in range(n):
        dx = np.zeros(n)
        dx[i] = h
        fp, _ = problem.objective(x + dx)
        fm, _ = problem.objective(x - dx)
        g_fd[i] = (fp - fm) / (2 * h)
        cep, _ = problem.eval_eq(x + dx)
        cem, _ = problem.eval_eq(x - dx)
        if cep.size:
            Je_fd[:, i] = (cep - cem) / (2 * h)
        cip, _ = problem.eval_in(x + dx)
        cim, _ = problem.eval_in(x - dx)
        if cip.size:
            Ji_fd[:, i] = (cip - cim) / (2 * h)

    def rel(a, b):
        if a.size == 0:
            return 0.0
        return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b))))

    return {"objective": rel(g, g_fd), "eq": rel(J_eq, Je_fd),
            "ineq": rel(J_in, Ji_fd)}
