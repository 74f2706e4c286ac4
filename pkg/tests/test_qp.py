import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import projected_gradient_qp, random_qp
from overact.qp import (INFEASIBLE, MAX_ITER, OPTIMAL, OcpProblem, QpProblem, condense, kkt_residuals,
                        ocp_kkt_residuals, solve, solve_ocp)


def test_unconstrained_minimum():
    sol = solve(QpProblem(H=np.eye(2), g=[-1.0, -1.0]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.z, [1, 1], atol=1e-8)


def test_single_active_constraint():
    sol = solve(QpProblem(H=np.eye(2), g=np.zeros(2), A_in=[[-1.0, 0.0]], b_in=[-1.0]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.z, [1, 0], atol=1e-7)
    assert sol.lam[0] == pytest.approx(1.0, abs=1e-6)


def test_equality_constraint():
    # min |z|^2/2 s.t. z1 + z2 = 2 -> (1, 1), multiplier -1
    sol = solve(QpProblem(H=np.eye(2), g=np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[2.0]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.z, [1, 1], atol=1e-8)
    assert sol.nu[0] == pytest.approx(-1.0, abs=1e-8)


def test_infeasible_detected():
    prob = QpProblem(H=np.eye(1), g=[0.0], A_in=[[1.0], [-1.0]], b_in=[-1.0, -1.0])
    sol = solve(prob, max_iter=200)
    assert sol.status == INFEASIBLE


def test_construction_checks():
    with pytest.raises(ValueError):
        QpProblem(H=[[1.0, 0.0], [0.0, -1.0]], g=np.zeros(2))
    with pytest.raises(ValueError):
        QpProblem(H=[[1.0, 0.5], [0.0, 1.0]], g=np.zeros(2))
    with pytest.raises(ValueError):
        QpProblem(H=np.eye(2), g=np.zeros(2), A_in=np.ones((2, 2)), b_in=[1.0])


def test_deadline_returns_best_iterate():
    rng = np.random.default_rng(3)
    H, g, A, b, _ = random_qp(rng)
    while A.shape[0] == 0:
        H, g, A, b, _ = random_qp(rng)
    sol = solve(QpProblem(H=H, g=g, A_in=A, b_in=b), deadline=0.0)
    assert sol.status == MAX_ITER
    assert np.all(np.isfinite(sol.z))
    sol = solve(QpProblem(H=H, g=g, A_in=A, b_in=b), max_iter=1)
    assert sol.status == MAX_ITER


def test_deterministic_and_json_round_trip():
    rng = np.random.default_rng(9)
    H, g, A, b, _ = random_qp(rng)
    prob = QpProblem(H=H, g=g, A_in=A, b_in=b)
    a, c = solve(prob), solve(QpProblem.from_json(prob.to_json()))
    assert a.z.tobytes() == c.z.tobytes()
    with pytest.raises(ValueError):
        QpProblem.from_json('{"format": "other"}')


def test_random_qps_match_projected_gradient():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        H, g, A, b, singular = random_qp(rng)
        prob = QpProblem(H=H, g=g, A_in=A, b_in=b)
        sol = solve(prob)
        assert sol.status == OPTIMAL
        z_ref, _ = projected_gradient_qp(H, g, A, b)
        # with a singular H the minimiser is a set, on which H z and the objective are constant
        diff = H @ (sol.z - z_ref) if singular else sol.z - z_ref
        assert np.max(np.abs(diff)) < 1e-5
        assert abs(prob.objective(sol.z) - prob.objective(z_ref)) < 1e-5
        assert kkt_residuals(prob, sol.z, sol.nu, sol.lam).max() < 1e-6


@given(st.integers(0, 2**32 - 1))
def test_optimal_status_certified(seed):
    rng = np.random.default_rng(seed)
    H, g, A, b, _ = random_qp(rng)
    prob = QpProblem(H=H, g=g, A_in=A, b_in=b)
    sol = solve(prob, tol=1e-6)
    if sol.status == OPTIMAL:
        assert kkt_residuals(prob, sol.z, sol.nu, sol.lam).max() < 1e-6


def _random_ocp(rng, n=12, nx=3, nu=2, bounded=True):
    A = np.array([np.eye(nx) + 0.1 * rng.normal(size=(nx, nx)) for _ in range(n - 1)])
    B = 0.2 * rng.normal(size=(n - 1, nx, nu))
    c = 0.05 * rng.normal(size=(n - 1, nx))
    Q = np.array([np.diag(rng.uniform(0.5, 2.0, nx)) for _ in range(n)])
    R = np.array([np.diag(rng.uniform(0.1, 1.0, nu)) for _ in range(n - 1)])
    q = rng.normal(size=(n, nx))
    r = 0.1 * rng.normal(size=(n - 1, nu))
    x0 = 0.3 * rng.normal(size=nx)
    inf = np.inf
    xlb, xub = np.full((n, nx), -inf), np.full((n, nx), inf)
    ulb, uub = np.full((n - 1, nu), -inf), np.full((n - 1, nu), inf)
    if bounded:
        # loose enough to be feasible from x0, tight enough to be active somewhere
        xub[:, 0] = 0.5
        xlb[:, 1] = -0.5
        ulb[:], uub[:] = -1.0, 1.0
    return OcpProblem(A, B, c, Q, q, R, r, x0, xlb, xub, ulb, uub)


@pytest.mark.parametrize("seed", range(5))
def test_ocp_solver_matches_condensed_dense(seed):
    rng = np.random.default_rng(seed)
    prob = _random_ocp(rng)
    sol = solve_ocp(prob, tol=1e-8, max_iter=80)
    assert sol.status == OPTIMAL
    dense = solve(condense(prob), tol=1e-9, max_iter=200)
    assert dense.status == OPTIMAL
    np.testing.assert_allclose(sol.u.reshape(-1), dense.z, atol=1e-5)
    assert ocp_kkt_residuals(prob, sol.u, sol.lam_x, sol.lam_u).max() < 1e-6
    np.testing.assert_allclose(sol.x, prob.rollout(sol.u), atol=1e-9)


def test_ocp_unconstrained_is_lqr_optimum():
    rng = np.random.default_rng(11)
    prob = _random_ocp(rng, bounded=False)
    sol = solve_ocp(prob, tol=1e-9)
    dense = condense(prob)
    z = np.linalg.solve(dense.H, -dense.g)
    np.testing.assert_allclose(sol.u.reshape(-1), z, atol=1e-7)


def test_ocp_kkt_flags_wrong_answers():
    rng = np.random.default_rng(1)
    prob = _random_ocp(rng)
    sol = solve_ocp(prob, tol=1e-8)
    bad = sol.u.copy()
    bad[0, 0] += 0.1
    assert ocp_kkt_residuals(prob, bad, sol.lam_x, sol.lam_u).max() > 1e-3


def test_warm_start_does_not_hurt_on_planner_sequence():
    from overact.planner import Planner, PlannerConfig
    from overact import planner as planner_mod
    from overact.scenario import interpolate_path

    seen = []
    real = planner_mod.solve

    def record(prob, **kw):
        sol = real(prob, **kw)
        seen.append((prob, kw.get("z0"), sol.iterations))
        return sol

    planner_mod.solve = record
    try:
        cfg = PlannerConfig()
        p = Planner(interpolate_path([[0, 0], [6, 0], [12, 3], [18, 3]], [1.0]), cfg)
        x = np.array([0.0, 0.0, 0.0, 0.0, 0.0])
        t = 0.0
        for _ in range(30):
            plan, _ = p.plan(t, x, np.zeros(3), np.zeros((0, 2)))
            t += cfg.dt
            x = plan.state_at(t)
    finally:
        planner_mod.solve = real
    warm = np.array([it for _, _, it in seen[1:]])
    cold = np.array([real(prob, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter).iterations for prob, _, _ in seen[1:]])
    assert warm.mean() <= cold.mean() + 1.0
