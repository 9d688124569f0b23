"""Closed-loop execution: receding-horizon solves, geodesic feedback applied
to the true uncertain system, set-membership updates between samples, and
containment/feasibility auditing of the resulting log.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .ccm import CCM, TubeConstants
from .errors import OCPInfeasible
from .estimation import Measurement, nonfalsified_set, update_parameter_set, \
    fixed_complexity_update
from .geodesics import GeodesicOptions, feedback_kappa, solve_geodesic
from .model import UncertainSystem, eval_dynamics
from .ocp import (MPCConfig, MPCSolution, OCPStructure, ReferenceMap,
                  build_ocp, check_feasibility, pack_solution, path_guess,
                  shift_candidate, solve_ocp, _rk4_sens)
from .polytopes import Polytope

log = logging.getLogger(__name__)

Array = np.ndarray


@dataclass(frozen=True)
class SimConfig:
    n_steps: int
    seed: int
    x0: Array
    theta_true: Array
    n_m: int = 1
    truth_substeps: int = 4
    adaptation: bool = True
    rigid_tube: bool = False
    rigid_delta: float = 0.0
    estimator: str = "exact"          # 'exact' | 'fixed'
    candidate_tol: float = 1e-6
    multistart_steps: int = 2         # offer scenario path guesses up to this step

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, float))
        object.__setattr__(self, "theta_true",
                           np.atleast_1d(np.asarray(self.theta_true, float)))
        if self.n_steps < 1 or self.truth_substeps < 1 or self.n_m < 1:
            raise ValueError("n_steps, truth_substeps and n_m must be >= 1")


@dataclass
class StepRecord:
    k: int
    t: float
    x: Array
    u: Array
    theta_A: Array
    theta_b: Array
    v_delta0: float
    delta0: float
    cost: float
    solver_status: str
    candidate_feasibility: float
    z_nodes: Array
    delta_nodes: Array
    v_nodes: Array
    theta_bar: Array
    delta_f_bar: float
    h_margins: Array
    solve_time: float = 0.0
    fallback: bool = False

    def core_tuple(self):
        """Deterministic content (timing excluded)."""
        return (self.k, self.t, self.x.tobytes(), self.u.tobytes(),
                self.theta_A.tobytes(), self.theta_b.tobytes(),
                self.v_delta0, self.delta0, self.cost, self.solver_status,
                self.candidate_feasibility, self.z_nodes.tobytes(),
                self.delta_nodes.tobytes(), self.v_nodes.tobytes(),
                self.theta_bar.tobytes(), self.delta_f_bar,
                self.h_margins.tobytes(), self.fallback)


@dataclass
class SimLog:
    status: str
    records: list[StepRecord] = field(default_factory=list)
    x_final: Array | None = None
    closed_loop_cost: float = 0.0
    theta_true: Array | None = None
    T_s: float = 0.0
    message: str = ""

    def core(self):
        return (self.status, tuple(r.core_tuple() for r in self.records),
                None if self.x_final is None else self.x_final.tobytes(),
                self.closed_loop_cost)

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "message": self.message,
            "T_s": self.T_s,
            "closed_loop_cost": self.closed_loop_cost,
            "theta_true": None if self.theta_true is None else self.theta_true.tolist(),
            "x_final": None if self.x_final is None else self.x_final.tolist(),
            "records": [{
                "k": r.k, "t": r.t, "x": r.x.tolist(), "u": r.u.tolist(),
                "Theta": {"A": r.theta_A.tolist(), "b": r.theta_b.tolist()},
                "v_delta0": r.v_delta0, "delta0": r.delta0, "cost": r.cost,
                "solver_status": r.solver_status,
                "candidate_feasibility": r.candidate_feasibility,
                "z_nodes": r.z_nodes.tolist(),
                "delta_nodes": r.delta_nodes.tolist(),
                "v_nodes": r.v_nodes.tolist(),
                "theta_bar": r.theta_bar.tolist(),
                "delta_f_bar": r.delta_f_bar,
                "h_margins": r.h_margins.tolist(),
                "solve_time": r.solve_time,
                "fallback": r.fallback,
            } for r in self.records],
        }

    def save_json(self, path: str):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    def save_csv(self, path: str):
        if not self.records:
            return
        n = self.records[0].x.size
        m = self.records[0].u.size
        cols = (["k", "t"] + [f"x{i}" for i in range(n)] +
                [f"u{i}" for i in range(m)] +
                ["v_delta0", "delta0", "cost", "solver_status",
                 "candidate_feasibility", "max_h_margin", "solve_time"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.records:
                w.writerow([r.k, r.t] + list(r.x) + list(r.u) +
                           [r.v_delta0, r.delta0, r.cost, r.solver_status,
                            r.candidate_feasibility, float(np.max(r.h_margins)),
                            r.solve_time])


def measure_derivative(sys: UncertainSystem, x, u, theta_true, d, eps) -> Array:
    """Noisy derivative measurement: true vector field plus noise in D_eps."""
    return eval_dynamics(sys, x, u, theta_true, d) + np.asarray(eps, float)


def sample_polytope(P: Polytope, rng: np.random.Generator,
                    max_tries: int = 64) -> Array:
    """Uniform sample via interval hull rejection (exact for boxes)."""
    lo, hi = P.interval_hull()
    for _ in range(max_tries):
        cand = lo + rng.random(P.dim) * (hi - lo)
        if P.contains(cand, tol=1e-12):
            return cand
    return 0.5 * (lo + hi)


def _nominal_fine_grid(sys, sol: MPCSolution, cfg: MPCConfig, ref: ReferenceMap,
                       n_fine: int) -> Array:
    """Nominal state on a grid of n_fine+1 points across the first interval."""
    h = cfg.T_s / n_fine
    out = np.empty((n_fine + 1, sys.n))
    out[0] = sol.z[0]
    zz = sol.z[0].copy()
    for i in range(n_fine):
        zz = _rk4_sens(sys, zz, sol.v[0], sol.theta_bar, h, ref, cfg.Q, cfg.R)[0]
        out[i + 1] = zz
    return out


def run_closed_loop(sys: UncertainSystem, ccm: CCM, consts: TubeConstants,
                    mpc_cfg: MPCConfig, sim_cfg: SimConfig, ref: ReferenceMap,
                    geo_opts: GeodesicOptions | None = None,
                    initial_paths=()) -> SimLog:
    """Receding-horizon loop: update the parameter set, solve, apply the
    geodesic feedback over one period, log everything.

    A mid-run solver failure falls back to the shifted candidate when that
    candidate checks feasible (it is the recursive-feasibility certificate);
    otherwise the run terminates with a loud status.
    """
    if not sys.Theta0.contains(sim_cfg.theta_true, tol=1e-9):
        raise ValueError("theta_true must lie in Theta0")
    # separate streams so the disturbance realization is identical with
    # adaptation on or off (same seed)
    ss = np.random.SeedSequence(sim_cfg.seed)
    rng, rng_eps = [np.random.default_rng(s) for s in ss.spawn(2)]
    geo_opts = geo_opts or GeodesicOptions(degree=mpc_cfg.geodesic_degree)
    Theta = sys.Theta0
    h_fixed = sys.Theta0.A
    h_off = sys.Theta0.b.copy()
    x = sim_cfg.x0.copy()
    prev_sol: MPCSolution | None = None
    simlog = SimLog(status="completed", theta_true=sim_cfg.theta_true,
                    T_s=mpc_cfg.T_s)
    pending_meas: list[Measurement] = []
    mode = "rigid" if sim_cfg.rigid_tube else "homothetic"
    cl_cost = 0.0

    for k in range(sim_cfg.n_steps):
        t_k = k * mpc_cfg.T_s
        if sim_cfg.adaptation and pending_meas:
            deltas = [nonfalsified_set(sys, mm) for mm in pending_meas]
            if sim_cfg.estimator == "fixed":
                h_off = fixed_complexity_update(h_fixed, h_off, deltas)
                Theta = Polytope(h_fixed, h_off)
            else:
                Theta = update_parameter_set(Theta, deltas)
            pending_meas = []

        prob, st = build_ocp(sys, ccm, consts, x, Theta, mpc_cfg, ref,
                             mode=mode, rigid_delta=sim_cfg.rigid_delta)
        # path guesses are rebuilt per step: the decision layout can change
        # after set updates, and updates can open routes that the shifted
        # candidate cannot reach as a local minimum; after the first updates
        # the route choice is settled and the candidate suffices
        guesses = ([path_guess(st, wp) for wp in initial_paths]
                   if k <= sim_cfg.multistart_steps else [])
        cand_feas = np.nan
        cand = None
        if prev_sol is not None:
            cand = shift_candidate(prev_sol, sys, ccm, consts, Theta, mpc_cfg,
                                   ref, x, geo_opts)
            cand.raw = pack_solution(st, cand)
            cand_feas = check_feasibility(prob, cand.raw)
            sol = solve_ocp(prob, st, warm=cand, extra_guesses=guesses)
        else:
            sol = solve_ocp(prob, st, extra_guesses=guesses)
        fallback = False
        if sol.status not in ("optimal",) and not sol.status.startswith("optimal"):
            if cand is not None and cand_feas <= sim_cfg.candidate_tol:
                sol = cand
                sol.status = "candidate-fallback"
                fallback = True
                log.warning("step %d: solver %s; applying shifted candidate",
                            k, sol.status)
            elif sol.feasibility <= 1e-6 and np.isfinite(sol.cost):
                # feasible but not fully converged: usable
                pass
            else:
                msg = (f"OCP infeasible at t={t_k:.3f} (status {sol.status}, "
                       f"feas {sol.feasibility:.2e})")
                if k == 0:
                    raise OCPInfeasible(msg)
                simlog.status = "infeasible_mid_run"
                simlog.message = msg
                log.error(msg)
                break

        # apply geodesic feedback over one period
        x_start = x.copy()
        vdel0 = float(np.sqrt(max(
            solve_geodesic(ccm, x_start, sol.z[0], geo_opts).energy, 0.0)))
        n_fine = 2 * sim_cfg.truth_substeps
        z_fine = _nominal_fine_grid(sys, sol, mpc_cfg, ref, n_fine)
        h_sub = mpc_cfg.T_s / sim_cfg.truth_substeps
        u_applied = None
        # measurement instants snapped to substep starts
        meas_subs = {min(int(round(j * sim_cfg.truth_substeps / sim_cfg.n_m)),
                         sim_cfg.truth_substeps - 1) for j in range(sim_cfg.n_m)}
        th_ref = sol.theta_bar
        zr = ref.z_ref(th_ref)
        vr = ref.v_ref(th_ref)
        for i_sub in range(sim_cfg.truth_substeps):
            d_cur = sample_polytope(sys.D, rng)
            tau0 = i_sub * h_sub

            def u_of(xx, tau):
                frac = tau / mpc_cfg.T_s
                idx = min(int(round(frac * n_fine)), n_fine)
                return feedback_kappa(ccm, xx, z_fine[idx], sol.v[0], geo_opts)

            # RK4 with feedback evaluated at each stage
            k1u = u_of(x, tau0)
            if u_applied is None:
                u_applied = k1u
            k1 = eval_dynamics(sys, x, k1u, sim_cfg.theta_true, d_cur)
            x2 = x + 0.5 * h_sub * k1
            k2u = u_of(x2, tau0 + 0.5 * h_sub)
            k2 = eval_dynamics(sys, x2, k2u, sim_cfg.theta_true, d_cur)
            x3 = x + 0.5 * h_sub * k2
            k3u = u_of(x3, tau0 + 0.5 * h_sub)
            k3 = eval_dynamics(sys, x3, k3u, sim_cfg.theta_true, d_cur)
            x4 = x + h_sub * k3
            k4u = u_of(x4, tau0 + h_sub)
            k4 = eval_dynamics(sys, x4, k4u, sim_cfg.theta_true, d_cur)
            if sim_cfg.adaptation and i_sub in meas_subs:
                eps = sample_polytope(sys.D_eps, rng_eps)
                xd = measure_derivative(sys, x, k1u, sim_cfg.theta_true,
                                        d_cur, eps)
                pending_meas.append(Measurement(t=t_k + tau0, x=x.copy(),
                                                u=k1u.copy(), xdot_tilde=xd))
            cl_cost += h_sub * (float((x - zr) @ mpc_cfg.Q @ (x - zr))
                                + float((k1u - vr) @ mpc_cfg.R @ (k1u - vr)))
            x = x + (h_sub / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                simlog.status = "diverged"
                simlog.message = f"non-finite state at t={t_k + tau0:.3f}"
                break
        if simlog.status == "diverged":
            break

        u_applied = np.asarray(u_applied, float)
        rec = StepRecord(
            k=k, t=t_k, x=x_start, u=u_applied,
            theta_A=Theta.A.copy(), theta_b=Theta.b.copy(),
            v_delta0=vdel0,
            delta0=float(sol.delta[0]),
            cost=float(sol.cost) if np.isfinite(sol.cost) else np.nan,
            solver_status=sol.status,
            candidate_feasibility=float(cand_feas),
            z_nodes=sol.z.copy(), delta_nodes=sol.delta.copy(),
            v_nodes=sol.v.copy(), theta_bar=sol.theta_bar.copy(),
            delta_f_bar=float(sol.delta_f_bar),
            h_margins=sys.h(x_start, u_applied),
            solve_time=sol.solve_time, fallback=fallback)
        simlog.records.append(rec)
        simlog.x_final = x.copy()
        prev_sol = sol

    simlog.closed_loop_cost = cl_cost
    return simlog


@dataclass
class ContainmentReport:
    passed: bool
    n_steps: int
    worst_tube_margin: float       # max over steps of V_delta - delta (<= tol)
    worst_constraint_margin: float
    violations: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"passed": self.passed, "n_steps": self.n_steps,
                "worst_tube_margin": self.worst_tube_margin,
                "worst_constraint_margin": self.worst_constraint_margin,
                "violations": self.violations}


def audit_containment(simlog: SimLog, ccm: CCM, sys: UncertainSystem,
                      mpc_cfg: MPCConfig, tol_c: float = 1e-4,
                      geo_opts: GeodesicOptions | None = None) -> ContainmentReport:
    """Check the logged run: the measured state one period ahead must lie in
    the predicted tube, and constraints must hold at sample instants."""
    geo_opts = geo_opts or GeodesicOptions(degree=mpc_cfg.geodesic_degree)
    worst_tube = -np.inf
    worst_h = -np.inf
    violations = []
    s = mpc_cfg.substeps
    recs = simlog.records
    for i, r in enumerate(recs):
        x_next = recs[i + 1].x if i + 1 < len(recs) else simlog.x_final
        if x_next is None:
            continue
        z_Ts = r.z_nodes[s]
        d_Ts = r.delta_nodes[s]
        vd = float(np.sqrt(max(solve_geodesic(ccm, x_next, z_Ts, geo_opts).energy,
                               0.0)))
        margin = vd - d_Ts
        worst_tube = max(worst_tube, margin)
        if margin > tol_c:
            violations.append({"k": r.k, "type": "tube", "margin": margin})
        hm = float(np.max(r.h_margins))
        worst_h = max(worst_h, hm)
        if hm > tol_c:
            violations.append({"k": r.k, "type": "constraint", "margin": hm})
    return ContainmentReport(passed=not violations, n_steps=len(recs),
                             worst_tube_margin=worst_tube,
                             worst_constraint_margin=worst_h,
                             violations=violations)
