import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from overact import kernels
from overact.planner import (Planner, PlannerConfig, ReferencePath, build_trajectory, planning_dynamics,
                             stop_inputs)
from overact.qp import kkt_residuals, solve
from overact.scenario import interpolate_path


def _rk4(x, u, dt):
    f = lambda s: planning_dynamics(s, u)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _straight(length=30.0, v=1.0):
    return interpolate_path([[0, 0], [length, 0]], [v])


def test_planning_dynamics_examples():
    np.testing.assert_allclose(planning_dynamics([0, 0, 0, 1, 0], [0, 0]), [1, 0, 0, 0, 0])
    out = planning_dynamics([0, 0, math.pi / 2, 2, 0], [0, 0])
    assert out[0] == pytest.approx(0, abs=1e-15) and out[1] == pytest.approx(2)
    np.testing.assert_allclose(planning_dynamics([0, 0, 0, 0, 0.3], [1, 0.5])[2:], [0.3, 1, 0.5])


@given(st.lists(st.floats(-3, 3), min_size=5, max_size=5), st.lists(st.floats(-2, 2), min_size=2, max_size=2),
       st.floats(0.01, 0.3))
def test_linearisation_matches_central_differences(x, u, dt):
    x, u = np.array(x), np.array(u)
    xn, jx, ju = kernels.plan_rk4_jac(x, u, dt)
    np.testing.assert_allclose(xn, _rk4(x, u, dt), atol=1e-12)
    h = 1e-6
    fd_x = np.column_stack([(_rk4(x + h * e, u, dt) - _rk4(x - h * e, u, dt)) / (2 * h) for e in np.eye(5)])
    fd_u = np.column_stack([(_rk4(x, u + h * e, dt) - _rk4(x, u - h * e, dt)) / (2 * h) for e in np.eye(2)])
    assert np.max(np.abs(jx - fd_x)) < 1e-5 * max(1.0, np.abs(fd_x).max())
    assert np.max(np.abs(ju - fd_u)) < 1e-5 * max(1.0, np.abs(fd_u).max())


def test_linearisation_structure_and_limits():
    x = np.array([0.0, 0.0, 0.0, 0.0, 0.0])
    _, jx, ju = kernels.plan_rk4_jac(x, np.zeros(2), 0.2)
    # at v_x = 0 the position rows do not depend on the heading
    assert jx[0, 2] == 0.0 and jx[1, 2] == 0.0
    _, jx, ju = kernels.plan_rk4_jac(np.array([1, 2, 0.4, 1.5, 0.3]), np.array([0.5, -0.2]), 1e-9)
    np.testing.assert_allclose(jx, np.eye(5), atol=1e-8)
    np.testing.assert_allclose(ju, 0.0, atol=1e-8)


def test_second_order_residual():
    rng = np.random.default_rng(0)
    x0 = np.array([0.0, 0.0, 0.2, 1.0, 0.1])
    us = rng.uniform(-0.5, 0.5, (20, 2))
    xs, A, B, c = kernels.plan_linearize(x0, us, 0.2)
    d = rng.normal(size=(20, 2))
    errs = []
    for eps in (1e-2, 5e-3):
        u2 = us + eps * d
        exact = kernels.plan_rollout(x0, u2, 0.2, 1)
        lin = xs.copy()
        dx = np.zeros(5)
        for k in range(20):
            dx = A[k] @ dx + B[k] @ (eps * d[k])
            lin[k + 1] = xs[k + 1] + dx
        errs.append(np.max(np.abs(exact - lin)))
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_trajectory_sample_count():
    cfg = PlannerConfig()
    traj, nodes = build_trajectory(0.0, np.zeros(5), np.zeros((cfg.horizon, 2)), cfg)
    assert len(traj.t) == int(round(4.0 / 0.01)) + 1
    assert nodes.shape == (21, 5)
    np.testing.assert_allclose(np.diff(traj.t), 0.01)


def test_stop_inputs_brake_to_rest():
    x0 = np.array([0, 0, 0, 1.5, 0.4])
    u = stop_inputs(x0, 20, 0.2, 2.0, 3.0)
    xs = kernels.plan_rollout(x0, u, 0.2, 1)
    assert np.all(np.abs(u[:, 0]) <= 2.0) and np.all(np.abs(u[:, 1]) <= 3.0)
    assert abs(xs[-1, 3]) < 1e-12 and abs(xs[-1, 4]) < 1e-12
    assert np.all(np.diff(xs[:, 3]) <= 1e-12)


def test_path_profile_and_closest():
    path = _straight(10.0, 1.0)
    v = path.speed_profile(0.8, 0.8)
    assert v[-1] == 0.0
    assert v[0] == pytest.approx(1.0)
    s, d = path.closest(np.array([3.3, 0.4]))
    assert s == pytest.approx(3.3, abs=1e-9) and d == pytest.approx(0.4, abs=1e-9)
    with pytest.raises(ValueError):
        ReferencePath(x=[0, 0], y=[0, 0], psi=[0, 0], v=[1, 1])


def test_straight_path_plan_stays_on_path():
    planner = Planner(_straight(), PlannerConfig())
    plan, rec = planner.plan(0.0, np.array([0, 0, 0, 1.0, 0]), np.zeros(3), np.zeros((0, 2)))
    assert rec.status == "optimal" and rec.branch == "bootstrap"
    assert np.max(np.abs(plan.trajectory.pose[:, 1])) < 1e-6
    assert np.max(np.abs(plan.trajectory.pose[:, 2])) < 1e-6
    assert np.max(np.abs(plan.trajectory.vel[:, 0] - 1.0)) < 0.02
    assert rec.cost < 1e-2


def test_startup_from_rest():
    cfg = PlannerConfig()
    planner = Planner(_straight(), cfg)
    plan, rec = planner.plan(0.0, np.zeros(5), np.zeros(3), np.zeros((0, 2)))
    np.testing.assert_allclose(plan.trajectory.pose[0], 0.0)
    assert np.all(np.abs(plan.inputs[:, 0]) <= cfg.a_max + 1e-9)
    assert plan.trajectory.vel[-1, 0] > 0.5
    assert plan.trajectory.vel[-1, 0] <= 1.0 + 0.05


def test_bi_level_rule():
    cfg = PlannerConfig()
    planner = Planner(_straight(), cfg)
    first, _ = planner.plan(0.0, np.array([0, 0, 0, 1.0, 0]), np.zeros(3), np.zeros((0, 2)))
    # small deviation: continue open loop from the previous plan
    expect = first.state_at(0.2)
    meas = expect + np.array([0.02, -0.03, 0.01, 0.05, 0.0])
    second, rec = planner.plan(0.2, meas, np.zeros(3), np.zeros((0, 2)))
    assert rec.branch == "open_loop"
    np.testing.assert_array_equal(rec.x_init, expect)
    np.testing.assert_allclose(second.trajectory.pose[0], first.trajectory.sample(0.2)[0], atol=1e-12)
    # impulse: reinitialise at the measured state
    hit = second.state_at(0.4) + np.array([0.0, 0.5, 0.0, 0.0, 0.0])
    third, rec = planner.plan(0.4, hit, np.zeros(3), np.zeros((0, 2)))
    assert rec.branch == "reinit"
    np.testing.assert_allclose(third.trajectory.pose[0, :2], hit[:2])


def test_planner_qp_kkt():
    cfg = PlannerConfig()
    planner = Planner(_straight(), cfg, boundaries=[(-2, -3, 32, -3), (-2, 3, 32, 3)])
    x0 = np.array([0, 0.3, 0.1, 0.8, 0.0])
    from overact.freespace import extract_polytope
    poly = extract_polytope(np.zeros((0, 2)), x0[:3], planner.boundaries, planner.r_veh, seed_length=1.5)
    ref_pose, ref_v = planner.reference(x0, np.zeros(3))
    _, A, B, c = kernels.plan_linearize(x0, np.zeros((cfg.horizon, 2)), cfg.dt)
    prob, _, _ = planner.build_qp(x0, A, B, c, ref_pose, ref_v, poly, np.zeros(2))
    sol = solve(prob, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
    assert sol.optimal
    assert kkt_residuals(prob, sol.z, sol.nu, sol.lam).max() < 1e-6


def test_obstacle_beside_path_respected():
    cfg = PlannerConfig(t_pred=2.0)
    box = np.array([[x, y] for x in np.linspace(4, 5, 11) for y in np.linspace(0.3, 1.1, 9)])
    bnd = [(-2, -3, 22, -3), (-2, 3, 22, 3)]
    planner = Planner(_straight(20.0), cfg, boundaries=bnd)
    x = np.array([0.0, 0.0, 0.0, 1.0, 0.0])
    t = 0.0
    lateral = []
    for _ in range(40):
        plan, rec = planner.plan(t, x, np.zeros(3), box)
        assert rec.status == "optimal"
        # the emitted plan stays inside the admissible region
        assert rec.violation_nodes <= 1e-6
        assert np.all(plan.polytope.contains(plan.nodes[1:, :2], tol=1e-6))
        t += cfg.dt
        x = plan.state_at(t)
        lateral.append(x[1])
    # the plan leaves the path on the side away from the obstacle and gets past it
    assert min(lateral) < -0.2
    assert x[0] > 5.0
