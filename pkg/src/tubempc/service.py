"""HTTP service exposing the toolkit: verification, constants, geodesic
queries, single OCP solves, closed-loop simulation and an estimation demo.

The CLI is a thin client of these endpoints. Artifact files (manifest,
reports, logs) are written server-side when `out_dir` is given; responses
always carry the JSON payloads as well.
"""
from __future__ import annotations

import json
import os

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .ccm import compute_constants, verify_ccm
from .configio import RunConfig, load_config, write_manifest
from .errors import OCPInfeasible, TubeMPCError
from .estimation import Measurement, nonfalsified_set, update_parameter_set
from .geodesics import solve_geodesic
from .model import eval_dynamics
from .ocp import build_ocp, path_guess, solve_ocp
from .polytopes import Polytope
from .simulate import audit_containment, run_closed_loop, sample_polytope

app = FastAPI(title="tubempc", version=__version__)


class ServiceRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    config: dict
    config_dir: str = "."
    config_path: str | None = None
    out_dir: str | None = None


class VerifyResponse(BaseModel):
    passed: bool
    report: dict
    manifest: dict | None = None


class ConstantsResponse(BaseModel):
    constants: dict
    sample_count: int
    safety_factor: float
    manifest: dict | None = None


class GeodesicRequest(ServiceRequest):
    x: list[float]
    z: list[float]


class GeodesicResponse(BaseModel):
    v_delta: float
    energy: float
    length: float
    curve: dict


class SolveOCPRequest(ServiceRequest):
    x0: list[float]
    rigid: bool = False


class SolveOCPResponse(BaseModel):
    status: str
    cost: float
    feasibility: float
    solution: dict
    solve_time: float
    manifest: dict | None = None


class SimulateRequest(ServiceRequest):
    seed: int | None = None
    adaptation: bool | None = None
    rigid_tube: bool | None = None


class SimulateResponse(BaseModel):
    status: str
    closed_loop_cost: float
    containment: dict
    n_steps: int
    log: dict
    manifest: dict | None = None


class EstimateDemoRequest(ServiceRequest):
    n_steps: int = 10
    seed: int | None = None


class EstimateDemoResponse(BaseModel):
    widths: list[float]
    theta_history: list[dict]
    contains_truth: bool
    manifest: dict | None = None


def _parse(req: ServiceRequest) -> tuple[RunConfig, str]:
    try:
        return load_config(req.config, base_dir=req.config_dir)
    except Exception as exc:
        raise HTTPException(status_code=422, detail=f"bad config: {exc}") from exc


def _tube_pieces(cfg: RunConfig, base):
    sys = cfg.system.build(base)
    if cfg.ccm is None:
        raise HTTPException(status_code=422, detail="config needs a ccm section")
    ccm = cfg.ccm.build(base)
    return sys, ccm


def _constants(cfg: RunConfig, base, sys, ccm):
    consts = cfg.constants.load(base)
    if consts is None:
        if cfg.sample_spec is None:
            raise HTTPException(status_code=422,
                                detail="need constants file or sample_spec")
        consts = compute_constants(sys, ccm, cfg.sample_spec.build(),
                                   cfg.constants.safety_factor,
                                   cfg.constants.refine)
    return consts


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/verify-ccm", response_model=VerifyResponse)
def verify_endpoint(req: ServiceRequest):
    cfg, base = _parse(req)
    sys, ccm = _tube_pieces(cfg, base)
    if cfg.sample_spec is None:
        raise HTTPException(status_code=422, detail="verify needs sample_spec")
    report = verify_ccm(sys, ccm, cfg.sample_spec.build(), cfg.verify.tol_rel)
    manifest = None
    if req.out_dir:
        manifest = write_manifest(req.out_dir, "verify-ccm", cfg, base,
                                  cfg.sample_spec.seed, req.config_path)
        with open(os.path.join(req.out_dir, "verify_report.json"), "w") as fh:
            json.dump(report.to_json(), fh, indent=1)
    return VerifyResponse(passed=report.passed, report=report.to_json(),
                          manifest=manifest)


@app.post("/constants", response_model=ConstantsResponse)
def constants_endpoint(req: ServiceRequest):
    cfg, base = _parse(req)
    sys, ccm = _tube_pieces(cfg, base)
    if cfg.sample_spec is None:
        raise HTTPException(status_code=422, detail="constants needs sample_spec")
    spec = cfg.sample_spec.build()
    consts = compute_constants(sys, ccm, spec, cfg.constants.safety_factor,
                               cfg.constants.refine)
    payload = consts.to_json()
    payload["sample_count"] = int(spec.points(sys).shape[0])
    payload["safety_factor"] = cfg.constants.safety_factor
    manifest = None
    if req.out_dir:
        manifest = write_manifest(req.out_dir, "constants", cfg, base,
                                  spec.seed, req.config_path)
        with open(os.path.join(req.out_dir, "constants.json"), "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
    return ConstantsResponse(constants=consts.to_json(),
                             sample_count=payload["sample_count"],
                             safety_factor=cfg.constants.safety_factor,
                             manifest=manifest)


@app.post("/geodesic", response_model=GeodesicResponse)
def geodesic_endpoint(req: GeodesicRequest):
    cfg, base = _parse(req)
    _, ccm = _tube_pieces(cfg, base)
    try:
        curve = solve_geodesic(ccm, np.asarray(req.x, float),
                               np.asarray(req.z, float), cfg.geodesic.build())
    except TubeMPCError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return GeodesicResponse(v_delta=float(np.sqrt(max(curve.energy, 0.0))),
                            energy=curve.energy, length=curve.length,
                            curve=curve.to_json())


@app.post("/solve-ocp", response_model=SolveOCPResponse)
def solve_ocp_endpoint(req: SolveOCPRequest):
    cfg, base = _parse(req)
    sys, ccm = _tube_pieces(cfg, base)
    consts = _constants(cfg, base, sys, ccm)
    if cfg.mpc is None or cfg.reference is None:
        raise HTTPException(status_code=422, detail="needs mpc and reference")
    mpc_cfg = cfg.mpc.build()
    ref = cfg.reference.build(sys)
    mode = "rigid" if req.rigid else "homothetic"
    rigid_delta = cfg.sim.rigid_delta if (req.rigid and cfg.sim) else 0.0
    prob, st = build_ocp(sys, ccm, consts, np.asarray(req.x0, float),
                         sys.Theta0, mpc_cfg, ref, mode=mode,
                         rigid_delta=rigid_delta)
    guesses = [path_guess(st, path) for path in cfg.scenario.initial_paths]
    sol = solve_ocp(prob, st, extra_guesses=guesses)
    manifest = None
    if req.out_dir:
        manifest = write_manifest(req.out_dir, "solve-ocp", cfg, base, None,
                                  req.config_path)
        with open(os.path.join(req.out_dir, "solution.json"), "w") as fh:
            json.dump(sol.to_json(), fh)
    return SolveOCPResponse(status=sol.status, cost=float(sol.cost),
                            feasibility=float(sol.feasibility),
                            solution=sol.to_json(), solve_time=sol.solve_time,
                            manifest=manifest)


@app.post("/simulate", response_model=SimulateResponse)
def simulate_endpoint(req: SimulateRequest):
    cfg, base = _parse(req)
    sys, ccm = _tube_pieces(cfg, base)
    consts = _constants(cfg, base, sys, ccm)
    if cfg.mpc is None or cfg.reference is None or cfg.sim is None:
        raise HTTPException(status_code=422, detail="needs mpc, reference, sim")
    mpc_cfg = cfg.mpc.build()
    ref = cfg.reference.build(sys)
    sim_cfg = cfg.sim.build()
    from dataclasses import replace
    if req.seed is not None:
        sim_cfg = replace(sim_cfg, seed=req.seed)
    if req.adaptation is not None:
        sim_cfg = replace(sim_cfg, adaptation=req.adaptation)
    if req.rigid_tube is not None:
        sim_cfg = replace(sim_cfg, rigid_tube=req.rigid_tube)
    try:
        log = run_closed_loop(sys, ccm, consts, mpc_cfg, sim_cfg, ref,
                              geo_opts=cfg.geodesic.build(),
                              initial_paths=cfg.scenario.initial_paths)
    except OCPInfeasible as exc:
        raise HTTPException(status_code=409, detail=str(exc)) from exc
    report = audit_containment(log, ccm, sys, mpc_cfg,
                               geo_opts=cfg.geodesic.build())
    manifest = None
    if req.out_dir:
        manifest = write_manifest(req.out_dir, "simulate", cfg, base,
                                  sim_cfg.seed, req.config_path)
        log.save_json(os.path.join(req.out_dir, "simlog.json"))
        log.save_csv(os.path.join(req.out_dir, "simlog.csv"))
        with open(os.path.join(req.out_dir, "containment_report.json"), "w") as fh:
            json.dump(report.to_json(), fh, indent=1)
        _write_plot_data(req.out_dir, log, ccm)
    return SimulateResponse(status=log.status,
                            closed_loop_cost=log.closed_loop_cost,
                            containment=report.to_json(),
                            n_steps=len(log.records), log=log.to_json(),
                            manifest=manifest)


def _write_plot_data(out_dir: str, log, ccm):
    """Trajectory/tube figure data: nominal plans, scalings and the constant
    lower metric bound for ellipsoidal cross sections."""
    data = {
        "M_lower": ccm.M_lower.tolist(),
        "steps": [{
            "k": r.k, "x": r.x.tolist(), "z_nodes": r.z_nodes.tolist(),
            "delta_nodes": r.delta_nodes.tolist(),
        } for r in log.records],
    }
    with open(os.path.join(out_dir, "plot_data.json"), "w") as fh:
        json.dump(data, fh)


@app.post("/estimate-demo", response_model=EstimateDemoResponse)
def estimate_demo_endpoint(req: EstimateDemoRequest):
    """Open-loop set-membership demo: hold the reference input with a dither,
    update the parameter set from derivative measurements each step."""
    cfg, base = _parse(req)
    sys, ccm = _tube_pieces(cfg, base)
    if cfg.sim is None or cfg.reference is None:
        raise HTTPException(status_code=422, detail="needs sim and reference")
    ref = cfg.reference.build(sys)
    sim_cfg = cfg.sim.build()
    seed = req.seed if req.seed is not None else sim_cfg.seed
    rng = np.random.default_rng(seed)
    theta_true = sim_cfg.theta_true
    x = sim_cfg.x0.copy()
    Theta = sys.Theta0
    lo, hi = sys.Theta0.interval_hull()
    th_mid = 0.5 * (lo + hi)
    vr = ref.v_ref(th_mid)
    widths = [float(np.sum(sys.Theta0.interval_hull()[1]
                           - sys.Theta0.interval_hull()[0]))]
    history = [Theta.to_dict()]
    h = 0.05
    contains = True
    for k in range(req.n_steps):
        u = vr + 0.2 * rng.standard_normal(sys.m)
        d = sample_polytope(sys.D, rng)
        eps = sample_polytope(sys.D_eps, rng)
        xdot = eval_dynamics(sys, x, u, theta_true, d)
        meas = Measurement(t=k * h, x=x.copy(), u=u, xdot_tilde=xdot + eps)
        delta = nonfalsified_set(sys, meas)
        Theta = update_parameter_set(Theta, [delta])
        lo, hi = Theta.interval_hull()
        widths.append(float(np.sum(hi - lo)))
        history.append(Theta.to_dict())
        contains = contains and Theta.contains(theta_true, tol=1e-7)
        x = x + h * xdot
    manifest = None
    if req.out_dir:
        manifest = write_manifest(req.out_dir, "estimate-demo", cfg, base,
                                  seed, req.config_path)
        with open(os.path.join(req.out_dir, "theta_history.json"), "w") as fh:
            json.dump({"widths": widths, "history": history}, fh, indent=1)
    return EstimateDemoResponse(widths=widths, theta_history=history,
                                contains_truth=contains, manifest=manifest)
