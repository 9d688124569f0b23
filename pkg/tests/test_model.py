import numpy as np
import pytest

from tubempc.model import (QuadrotorParams, eval_dynamics, eval_jacobians,
                           eval_nominal, load_system, quadrotor_model)

G_ACC = 9.81


@pytest.fixture(scope="module")
def quad():
    return quadrotor_model()


def test_hover_equilibrium(quad):
    theta = np.array([2.058])
    u = G_ACC / (2 * theta[0]) * np.ones(2)
    xd = eval_dynamics(quad, np.zeros(6), u, theta, np.zeros(1))
    assert np.max(np.abs(xd)) < 1e-12


def test_theta_zero_d_zero_gives_f_alone(quad):
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.standard_normal(6)
        assert np.allclose(eval_dynamics(quad, x, np.zeros(2), np.zeros(1),
                                         np.zeros(1)), quad.f(x))


def test_tilted_disturbance_components(quad):
    # phi = pi/6, zero velocities, u = 0, d = 0.1: hand-evaluated rows 4-5
    x = np.zeros(6)
    x[2] = np.pi / 6
    xd = eval_dynamics(quad, x, np.zeros(2), np.zeros(1), np.array([0.1]))
    assert np.isclose(xd[3], -G_ACC * np.sin(np.pi / 6) + 0.1 * np.cos(np.pi / 6))
    assert np.isclose(xd[4], -G_ACC * np.cos(np.pi / 6) - 0.1 * np.sin(np.pi / 6))


def test_nominal_equals_dynamics_at_zero_disturbance(quad):
    rng = np.random.default_rng(1)
    for _ in range(10):
        z = rng.standard_normal(6)
        v = rng.standard_normal(2)
        th = rng.uniform(2.0, 2.1, 1)
        assert np.array_equal(eval_nominal(quad, z, v, th),
                              eval_dynamics(quad, z, v, th, np.zeros(1)))


def test_hover_any_theta_bar(quad):
    # vertical acceleration cancels for u = v_ref(theta) at any theta
    for th in (1.9, 2.058, 2.2):
        u = G_ACC / (2 * th) * np.ones(2)
        xd = eval_nominal(quad, np.zeros(6), u, np.array([th]))
        assert abs(xd[4]) < 1e-12


def test_affinity_in_u_theta_d(quad):
    rng = np.random.default_rng(2)
    for _ in range(25):
        x = rng.standard_normal(6)
        u1, u2 = rng.standard_normal((2, 2))
        th1, th2 = rng.standard_normal((2, 1))
        d1, d2 = rng.standard_normal((2, 1))
        th, d, u = rng.standard_normal(1), rng.standard_normal(1), rng.standard_normal(2)
        mid_u = eval_dynamics(quad, x, (u1 + u2) / 2, th, d)
        avg_u = 0.5 * (eval_dynamics(quad, x, u1, th, d)
                       + eval_dynamics(quad, x, u2, th, d))
        assert np.max(np.abs(mid_u - avg_u)) < 1e-12
        mid_t = eval_dynamics(quad, x, u, (th1 + th2) / 2, d)
        avg_t = 0.5 * (eval_dynamics(quad, x, u, th1, d)
                       + eval_dynamics(quad, x, u, th2, d))
        assert np.max(np.abs(mid_t - avg_t)) < 1e-12
        mid_d = eval_dynamics(quad, x, u, th, (d1 + d2) / 2)
        avg_d = 0.5 * (eval_dynamics(quad, x, u, th, d1)
                       + eval_dynamics(quad, x, u, th, d2))
        assert np.max(np.abs(mid_d - avg_d)) < 1e-12


def test_jacobian_linear_system_exact():
    A = np.array([[0.0, 1.0], [-2.0, -3.0]])
    B = np.array([[0.0], [1.0]])
    sys = load_system({
        "name": "lin", "dims": {"n": 2, "m": 1, "p": 1, "q": 1},
        "f": {"terms": [{"exps_x": [1, 0], "coeff": A[:, 0].tolist()},
                        {"exps_x": [0, 1], "coeff": A[:, 1].tolist()}]},
        "B": {"terms": [{"exps_x": [0, 0], "coeff": B.tolist()}]},
        "G": {"terms": []},
        "E": {"terms": [{"exps_x": [0, 0], "coeff": [[0.0], [1.0]]}]},
        "Theta0": {"A": [[1.0], [-1.0]], "b": [1, 1]},
        "D": {"A": [[1.0], [-1.0]], "b": [0.1, 0.1]},
        "D_eps": {"A": [[1.0], [-1.0]], "b": [0, 0]},
    })
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.standard_normal(2)
        Ax, Bu = eval_jacobians(sys, x, rng.standard_normal(1),
                                np.zeros(1), np.zeros(1))
        assert np.allclose(Ax, A)
        assert np.allclose(Bu, B)


def test_quadrotor_jacobian_position_rows(quad):
    Ax, _ = eval_jacobians(quad, np.zeros(6), np.zeros(2),
                           np.array([2.058]), np.zeros(1))
    assert np.allclose(Ax[0], [0, 0, 0, 1, 0, 0])
    assert np.allclose(Ax[1], [0, 0, 0, 0, 1, 0])


def test_jacobians_match_finite_differences(quad):
    rng = np.random.default_rng(4)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        x = rng.uniform([-1, -1, -np.pi / 3, -2, -1, -np.pi],
                        [1, 1, np.pi / 3, 2, 1, np.pi])
        u = rng.uniform(-1, 3.5, 2)
        th = rng.uniform(2.03, 2.08, 1)
        d = rng.uniform(-0.1, 0.1, 1)
        Ax, Bu = eval_jacobians(quad, x, u, th, d)
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            fd = (eval_dynamics(quad, x + e, u, th, d)
                  - eval_dynamics(quad, x - e, u, th, d)) / (2 * h)
            worst = max(worst, np.max(np.abs(Ax[:, i] - fd)) / max(1, np.max(np.abs(fd))))
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (eval_dynamics(quad, x, u + e, th, d)
                  - eval_dynamics(quad, x, u - e, th, d)) / (2 * h)
            worst = max(worst, np.max(np.abs(Bu[:, i] - fd)) / max(1, np.max(np.abs(fd))))
    assert worst < 1e-5


def test_quadrotor_sets_and_constraints(quad):
    lo, hi = quad.Theta0.interval_hull()
    assert np.isclose(lo[0], 0.99 * 2.058)   # 2.03742
    assert np.isclose(hi[0], 1.01 * 2.058)   # 2.07858
    assert quad.r == 12
    dlo, dhi = quad.D.interval_hull()
    assert np.isclose(dlo[0], -0.1) and np.isclose(dhi[0], 0.1)
    # input box rows present: evaluate at a violating input
    h = quad.h(np.zeros(6), np.array([3.6, 0.0]))
    assert np.max(h) > 0
    assert np.all(quad.h(np.zeros(6), np.array([3.5, -1.0])) <= 1e-12)
    # zero disturbance belongs to D
    assert quad.D.contains(np.zeros(1))


def test_zero_in_disturbance_set_scalar(scalar_sys):
    assert scalar_sys.D.contains(np.zeros(1))


def test_dimension_mismatch_raises(quad):
    with pytest.raises(ValueError):
        eval_dynamics(quad, np.zeros(5), np.zeros(2), np.zeros(1), np.zeros(1))
    with pytest.raises(ValueError):
        eval_dynamics(quad, np.zeros(6), np.zeros(3), np.zeros(1), np.zeros(1))
    with pytest.raises(ValueError):
        eval_dynamics(quad, np.zeros(6), np.zeros(2), np.zeros(2), np.zeros(1))


def test_quadrotor_params_validation():
    with pytest.raises(ValueError):
        QuadrotorParams(m=-1.0)


def test_load_system_rejects_nonaffine_G():
    with pytest.raises(ValueError):
        load_system({
            "name": "bad", "dims": {"n": 1, "m": 1, "p": 1, "q": 1},
            "f": {"terms": []},
            "B": {"terms": [{"exps_x": [0], "coeff": [[1.0]]}]},
            "G": {"terms": [{"exps_x": [0], "exps_u": [2], "coeff": [[1.0]]}]},
            "E": {"terms": [{"exps_x": [0], "coeff": [[1.0]]}]},
            "Theta0": {"A": [[1.0], [-1.0]], "b": [1, 1]},
            "D": {"A": [[1.0], [-1.0]], "b": [0, 0]},
        })


def test_loaded_system_jacobians_match_fd(planar_sys):
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(20):
        x = rng.standard_normal(2)
        u = rng.standard_normal(2)
        th = rng.uniform(-0.5, 0.5, 1)
        d = rng.uniform(-0.01, 0.01, 2)
        Ax, Bu = eval_jacobians(planar_sys, x, u, th, d)
        for i in range(2):
            e = np.zeros(2)
            e[i] = h
            fd = (eval_dynamics(planar_sys, x + e, u, th, d)
                  - eval_dynamics(planar_sys, x - e, u, th, d)) / (2 * h)
            assert np.max(np.abs(Ax[:, i] - fd)) < 1e-6
            fdu = (eval_dynamics(planar_sys, x, u + e, th, d)
                   - eval_dynamics(planar_sys, x, u - e, th, d)) / (2 * h)
            assert np.max(np.abs(Bu[:, i] - fdu)) < 1e-6
