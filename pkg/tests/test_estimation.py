import numpy as np
import pytest

from tubempc.errors import EstimationInconsistent
from tubempc.estimation import (Measurement, fixed_complexity_update,
                                nonfalsified_set, remove_redundant,
                                update_parameter_set, vertices)
from tubempc.model import load_system
from tubempc.polytopes import Polytope


def _scalar_sys(g_val=1.0, d_half=0.1, eps_half=0.0):
    return load_system({
        "name": "s", "dims": {"n": 1, "m": 1, "p": 1, "q": 1},
        "f": {"terms": []},
        "B": {"terms": []},
        "G": {"terms": [{"exps_x": [0], "exps_u": [0], "coeff": [[g_val]]}]},
        "E": {"terms": [{"exps_x": [0], "coeff": [[1.0]]}]},
        "Theta0": {"A": [[1.0], [-1.0]], "b": [2.0786, -2.0374]},
        "D": {"A": [[1.0], [-1.0]], "b": [d_half, d_half]},
        "D_eps": {"A": [[1.0], [-1.0]], "b": [eps_half, eps_half]},
    })


def _interval(P: Polytope):
    lo, hi = P.interval_hull()
    return float(lo[0]), float(hi[0])


def test_nonfalsified_interval_oracle():
    # r = 0.5, G = 1, E = 1, D = [-0.1, 0.1], D_eps = {0} -> [0.4, 0.6]
    sys = _scalar_sys()
    meas = Measurement(t=0.0, x=np.zeros(1), u=np.zeros(1),
                       xdot_tilde=np.array([0.5]))
    lo, hi = _interval(nonfalsified_set(sys, meas))
    assert np.isclose(lo, 0.4, atol=1e-9)
    assert np.isclose(hi, 0.6, atol=1e-9)


def test_nonfalsified_interval_with_noise():
    sys = _scalar_sys(eps_half=0.1)
    meas = Measurement(t=0.0, x=np.zeros(1), u=np.zeros(1),
                       xdot_tilde=np.array([0.5]))
    lo, hi = _interval(nonfalsified_set(sys, meas))
    assert np.isclose(lo, 0.3, atol=1e-9)
    assert np.isclose(hi, 0.7, atol=1e-9)


def test_nonfalsified_no_information_and_falsified():
    sys = _scalar_sys(g_val=0.0)
    consistent = Measurement(t=0.0, x=np.zeros(1), u=np.zeros(1),
                             xdot_tilde=np.array([0.05]))
    P = nonfalsified_set(sys, consistent)
    # Delta = R: any parameter value admissible
    for th in (-100.0, 0.0, 100.0):
        assert P.contains([th])
    falsified = Measurement(t=0.0, x=np.zeros(1), u=np.zeros(1),
                            xdot_tilde=np.array([0.5]))
    with pytest.raises(EstimationInconsistent):
        nonfalsified_set(sys, falsified)


def test_nonfalsified_membership_grid_oracle():
    """theta in Delta iff residual - G theta lies in E D (+) D_eps."""
    sys = _scalar_sys(g_val=2.0, d_half=0.1, eps_half=0.05)
    meas = Measurement(t=0.0, x=np.array([0.3]), u=np.array([-0.2]),
                       xdot_tilde=np.array([0.8]))
    P = nonfalsified_set(sys, meas)
    r = meas.xdot_tilde - sys.f(meas.x) - sys.B(meas.x) @ meas.u
    for th in np.linspace(-1, 1.5, 201):
        resid = float(r[0] - 2.0 * th)
        member = abs(resid) <= 0.1 + 0.05 + 1e-12
        assert P.contains([th], tol=1e-9) == member


def test_update_no_information_keeps_set():
    prev = Polytope.from_interval(2.0374, 2.0786)
    wide = Polytope.from_interval(0.0, 5.0)
    out = update_parameter_set(prev, [wide])
    lo, hi = _interval(out)
    assert np.isclose(lo, 2.0374) and np.isclose(hi, 2.0786)


def test_update_interval_intersection_oracle():
    prev = Polytope.from_interval(2.0374, 2.0786)
    delta = Polytope.from_interval(2.05, 2.2)
    lo, hi = _interval(update_parameter_set(prev, [delta]))
    assert np.isclose(lo, 2.05) and np.isclose(hi, 2.0786)


def test_update_empty_raises():
    prev = Polytope.from_interval(0.0, 1.0)
    delta = Polytope.from_interval(2.0, 3.0)
    with pytest.raises(EstimationInconsistent):
        update_parameter_set(prev, [delta])


def test_monotone_nesting_sequence():
    rng = np.random.default_rng(0)
    theta_true = 0.3
    Theta = Polytope.from_interval(-1.0, 1.0)
    prev = Theta
    for _ in range(12):
        center = theta_true + rng.uniform(-0.2, 0.2)
        width = rng.uniform(0.3, 1.2)
        delta = Polytope.from_interval(center - width, center + width)
        Theta = update_parameter_set(Theta, [delta])
        assert prev.contains_polytope(Theta)
        assert Theta.contains([theta_true], tol=1e-9)
        prev = Theta


def test_fixed_complexity_matches_exact_in_1d():
    H = np.array([[1.0], [-1.0]])
    h_prev = np.array([2.0786, -2.0374])
    deltas = [Polytope.from_interval(2.05, 2.2)]
    h_new = fixed_complexity_update(H, h_prev, deltas)
    exact = update_parameter_set(Polytope(H, h_prev), deltas)
    lo, hi = _interval(exact)
    assert np.isclose(h_new[0], hi, atol=1e-9)
    assert np.isclose(h_new[1], -lo, atol=1e-9)
    assert np.all(h_new <= h_prev + 1e-12)


def test_fixed_complexity_no_information():
    H = np.array([[1.0], [-1.0]])
    h_prev = np.array([1.0, 1.0])
    h_new = fixed_complexity_update(H, h_prev,
                                    [Polytope.from_interval(-5, 5)])
    assert np.allclose(h_new, h_prev)


def test_fixed_complexity_overapproximates_exact_2d():
    H = np.vstack([np.eye(2), -np.eye(2)])
    h_prev = np.ones(4)
    # a rotated halfspace cut
    delta = Polytope(np.array([[1.0, 1.0]]), np.array([0.5]))
    h_new = fixed_complexity_update(H, h_prev, [delta])
    exact = Polytope(np.vstack([H, delta.A]), np.concatenate([h_prev, delta.b]))
    # every exact vertex stays inside the fixed-complexity box
    outer = Polytope(H, h_new)
    for v in exact.vertices():
        assert outer.contains(v, tol=1e-8)


def test_fixed_complexity_infeasible_raises():
    H = np.array([[1.0], [-1.0]])
    with pytest.raises(EstimationInconsistent):
        fixed_complexity_update(H, np.array([1.0, -2.0]),
                                [Polytope.from_interval(5.0, 6.0)])


def test_quadrotor_nonfalsified_contains_truth(quad_sys):
    """Degenerate Minkowski geometry: the true parameter is never falsified."""
    rng = np.random.default_rng(1)
    theta_true = np.array([1.01 * 2.058])
    for _ in range(25):
        x = rng.uniform([-1, -1, -0.9, -1.5, -0.9, -2], [1, 1, 0.9, 1.5, 0.9, 2])
        u = rng.uniform(0.5, 3.0, 2)
        d = rng.uniform(-0.1, 0.1, 1)
        eps = np.zeros(6)
        eps[3] = rng.uniform(-0.1, 0.1)
        eps[4] = rng.uniform(-0.1, 0.1)
        from tubempc.model import eval_dynamics
        xd = eval_dynamics(quad_sys, x, u, theta_true, d) + eps
        meas = Measurement(t=0.0, x=x, u=u, xdot_tilde=xd)
        Delta = nonfalsified_set(quad_sys, meas)
        assert Delta.contains(theta_true, tol=1e-7)
        # the set is informative: bounded interval once thrust is nonzero
        lo, hi = Delta.interval_hull()
        assert hi[0] - lo[0] < 1.0


def test_vertices_and_remove_redundant_reexports():
    P = Polytope.from_interval(0, 1)
    assert sorted(vertices(P).ravel().tolist()) == [0.0, 1.0]
    Q = Polytope(np.array([[1.0], [1.0], [-1.0]]), np.array([1.0, 2.0, 0.0]))
    assert remove_redundant(Q).A.shape[0] == 2
