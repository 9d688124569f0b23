"""Command-line front end: a thin client of the HTTP service.

By default requests are dispatched to the FastAPI app in-process (no server
needed); `--server URL` targets a running instance instead. Exit codes:
0 ok, 1 check failed, 2 usage/input error, 3 runtime infeasibility.
"""
from __future__ import annotations

import argparse
import json
import sys

import httpx


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    # in-process dispatch: synchronous bridge onto the ASGI app
    from starlette.testclient import TestClient

    from .service import app
    return TestClient(app, raise_server_exceptions=False)


def _load_config_arg(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {path}: {exc}", file=sys.stderr)
        raise SystemExit(2)


def _base_payload(args) -> dict:
    import os
    cfg = _load_config_arg(args.config)
    return {"config": cfg,
            "config_dir": os.path.dirname(os.path.abspath(args.config)),
            "config_path": args.config,
            "out_dir": args.out}


def _post(client, path, payload) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code == 422:
        print(f"error: {resp.json().get('detail')}", file=sys.stderr)
        raise SystemExit(2)
    if resp.status_code == 409:
        print(f"infeasible: {resp.json().get('detail')}", file=sys.stderr)
        raise SystemExit(3)
    if resp.status_code != 200:
        print(f"error: service returned {resp.status_code}: {resp.text}",
              file=sys.stderr)
        raise SystemExit(2)
    return resp.json()


def cmd_verify(args) -> int:
    with _client(args.server) as client:
        out = _post(client, "/verify-ccm", _base_payload(args))
    rep = out["report"]
    print(f"verify-ccm: {'PASS' if out['passed'] else 'FAIL'} "
          f"(worst contraction {rep['worst_contraction']:.3e}, "
          f"tol {rep['tolerance']:.3e}, points {rep['n_points']})")
    if not out["passed"] and rep.get("worst_point") is not None:
        print(f"worst sample: {rep['worst_point']}")
    return 0 if out["passed"] else 1


def cmd_constants(args) -> int:
    with _client(args.server) as client:
        out = _post(client, "/constants", _base_payload(args))
    c = out["constants"]
    print(f"constants: rho_c={c['rho_c']} L_D={c['L_D']:.6g} "
          f"L_G={c['L_G']} (safety factor {out['safety_factor']}, "
          f"{out['sample_count']} samples)")
    return 0


def cmd_geodesic(args) -> int:
    payload = _base_payload(args)
    payload["x"] = json.loads(args.x)
    payload["z"] = json.loads(args.z)
    with _client(args.server) as client:
        out = _post(client, "/geodesic", payload)
    print(f"v_delta={out['v_delta']:.8g} energy={out['energy']:.8g} "
          f"length={out['length']:.8g}")
    return 0


def cmd_solve_ocp(args) -> int:
    payload = _base_payload(args)
    payload["x0"] = json.loads(args.x0)
    payload["rigid"] = args.rigid_tube
    with _client(args.server) as client:
        out = _post(client, "/solve-ocp", payload)
    print(f"solve-ocp: {out['status']} cost={out['cost']:.6g} "
          f"feas={out['feasibility']:.2e} time={out['solve_time']:.2f}s")
    if out["status"].startswith("optimal") or out["feasibility"] <= 1e-6:
        return 0
    return 3


def cmd_simulate(args) -> int:
    payload = _base_payload(args)
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.no_adaptation:
        payload["adaptation"] = False
    if args.rigid_tube:
        payload["rigid_tube"] = True
    with _client(args.server) as client:
        out = _post(client, "/simulate", payload)
    rep = out["containment"]
    print(f"simulate: {out['status']} steps={out['n_steps']} "
          f"closed-loop cost={out['closed_loop_cost']:.6g}")
    print(f"containment: {'PASS' if rep['passed'] else 'FAIL'} "
          f"(worst tube margin {rep['worst_tube_margin']:.3e})")
    if out["status"] != "completed":
        return 3
    return 0 if rep["passed"] else 1


def cmd_estimate_demo(args) -> int:
    payload = _base_payload(args)
    if args.seed is not None:
        payload["seed"] = args.seed
    payload["n_steps"] = args.steps
    with _client(args.server) as client:
        out = _post(client, "/estimate-demo", payload)
    w = out["widths"]
    print(f"estimate-demo: width {w[0]:.6g} -> {w[-1]:.6g} over "
          f"{len(w) - 1} updates; truth contained: {out['contains_truth']}")
    return 0 if out["contains_truth"] else 1


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tubempc",
                                 description="homothetic tube MPC toolkit")
    ap.add_argument("--server", default=None,
                    help="URL of a running service (default: in-process)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None, help="artifact directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1,
                       help="seed-parallel workers for batch runs")

    p = sub.add_parser("verify-ccm", help="check the contraction certificate")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("constants", help="compute tube tightening constants")
    common(p)
    p.set_defaults(func=cmd_constants)

    p = sub.add_parser("geodesic", help="solve one geodesic query")
    common(p)
    p.add_argument("--x", required=True, help="JSON list")
    p.add_argument("--z", required=True, help="JSON list")
    p.set_defaults(func=cmd_geodesic)

    p = sub.add_parser("solve-ocp", help="solve one receding-horizon problem")
    common(p)
    p.add_argument("--x0", required=True, help="JSON list")
    p.add_argument("--rigid-tube", action="store_true")
    p.set_defaults(func=cmd_solve_ocp)

    p = sub.add_parser("simulate", help="run the closed loop")
    common(p)
    p.add_argument("--no-adaptation", action="store_true")
    p.add_argument("--rigid-tube", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate-demo", help="set-membership estimation demo")
    common(p)
    p.add_argument("--steps", type=int, default=10)
    p.set_defaults(func=cmd_estimate_demo)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0


if __name__ == "__main__":
    sys.exit(main())
