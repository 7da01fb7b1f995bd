import numpy as np
import pytest

from bipedtune import gait as gait_mod
from bipedtune import mpc as mpc_mod
from bipedtune import srbm
from bipedtune.closed_loop import SimSetup
from bipedtune.mpc import (InfeasibleStanceError, MpcConfig, MpcController, MpcTheta, build_qp,
                           differentiate_policy, solve_mpc)

from oracles import fro_rel, mpc_instances, policy_fd, solve_u0


def _standing_problem(theta, params, contacts=None, cfg=MpcConfig()):
    x0 = srbm.make_state(com_pos=(0, 0, 0.55), params=params)
    x_ref = np.tile(x0, (cfg.horizon, 1))
    contacts = contacts if contacts is not None else [(True, True)] * cfg.horizon
    feet = srbm.standing_feet(x0[3:6], 0.047)
    return build_qp(x0, x_ref, contacts, feet, theta, cfg, params)


STIFF = MpcTheta([1e4] * 12, [1e-8] * 12)


@pytest.fixture(scope="module")
def walking():
    s = SimSetup()
    inst, _ = mpc_instances(MpcTheta.nominal(), gait_mod.preset("c_shape"), s, n_steps=30)
    return s, inst


def test_dimensions_and_row_count(params, theta):
    qp = _standing_problem(theta, params)
    assert qp.n == 120
    assert qp.m == 10 * 2 * 12 == 240
    assert len(qp.eq_pairs) == 20


def test_swing_force_limit_rhs_is_zero(params, theta):
    contacts = [(True, False)] * 5 + [(False, True)] * 5
    qp = _standing_problem(theta, params, contacts)
    for k in range(10):
        for i in range(2):
            row = (2 * k + i) * mpc_mod.ROWS_PER_FOOT + 5
            assert qp.G[row, k * 12 + 3 * i + 2] == 1.0
            assert qp.h[row] == (params.f_max_n if contacts[k][i] else 0.0)


def test_no_stance_foot_rejected(params, theta):
    contacts = [(True, True)] * 9 + [(False, False)]
    with pytest.raises(InfeasibleStanceError):
        _standing_problem(theta, params, contacts)


def test_bad_shapes_rejected(params, theta):
    x0 = srbm.make_state()
    feet = srbm.standing_feet(x0[3:6])
    with pytest.raises(ValueError):
        build_qp(x0, np.zeros((9, 15)), [(True, True)] * 10, feet, theta, MpcConfig(), params)
    with pytest.raises(ValueError):
        MpcTheta([1.0] * 11, [1.0] * 12)
    with pytest.raises(ValueError):
        MpcConfig(horizon=1)


def test_static_standing_splits_weight(params):
    sol = solve_mpc(_standing_problem(STIFF, params))
    u0 = sol.u[:12]
    assert abs(u0[2] - 58.86) < 1e-3 and abs(u0[5] - 58.86) < 1e-3
    np.testing.assert_allclose(u0[[0, 1, 3, 4]], 0.0, atol=1e-6)
    assert sol.kkt_residual < 1e-8


def test_static_standing_symmetric_for_any_equal_force_weights(params):
    theta = MpcTheta([100.0] * 12, [1e-3] * 12)
    u0 = solve_mpc(_standing_problem(theta, params)).u[:12]
    assert u0[2] == pytest.approx(u0[5], rel=1e-9)


def test_controller_wrapper(params):
    ctrl = MpcController(STIFF, MpcConfig(), params)
    x0 = srbm.make_state(com_pos=(0, 0, 0.55))
    u0, problem, sol = ctrl.solve(x0, np.tile(x0, (10, 1)), [(True, True)] * 10,
                                  srbm.standing_feet(x0[3:6]))
    assert u0[2] == pytest.approx(58.86, abs=1e-3)
    pj = ctrl.jacobians(problem, sol)
    assert pj.du_dx.shape == (12, 15) and pj.du_dtheta.shape == (12, 24)


def test_walking_solutions_feasible_and_kkt(walking):
    setup, inst = walking
    th = MpcTheta.nominal().flat
    for item in inst:
        u0, _, prob, sol = solve_u0(item, th, setup)
        assert sol.kkt_residual < 1e-8
        slack = prob.h[:24] - prob.G[:24] @ sol.u
        assert slack.min() > -1e-7


def test_homogeneity(walking):
    setup, inst = walking
    th = MpcTheta.nominal().flat
    for item in inst[::5]:
        u0 = solve_u0(item, th, setup)[0]
        for gamma in (0.01, 37.0):
            ug = solve_u0(item, gamma * th, setup)[0]
            assert np.abs(ug - u0).max() < 1e-8 * max(1.0, np.abs(u0).max())


def test_direction_theta_is_null(walking):
    setup, inst = walking
    th = MpcTheta.nominal().flat
    for item in inst[::3]:
        _, _, prob, sol = solve_u0(item, th, setup)
        pj = differentiate_policy(prob, sol)
        assert np.abs(pj.du_dtheta @ th).max() < 1e-7 * max(1.0, np.abs(sol.u[:12]).max())


def test_swing_rows_are_zero(walking):
    setup, inst = walking
    th = MpcTheta.nominal().flat
    seen = 0
    for item in inst:
        _, _, prob, sol = solve_u0(item, th, setup)
        pj = differentiate_policy(prob, sol)
        for i in range(2):
            if not item[3].in_stance[i]:
                seen += 1
                cols = np.r_[3 * i:3 * i + 3, 6 + 3 * i:6 + 3 * i + 3]
                assert not pj.du_dx[cols].any()
                assert not pj.du_dtheta[cols].any()
    assert seen > 0


def test_interior_r_column_matches_fd(params):
    # standing problem: only the equality rows bind, so the active set is stable
    x0 = srbm.make_state(com_pos=(0.01, -0.02, 0.54), com_vel=(0.1, 0, 0), params=params)
    x_ref = np.tile(srbm.make_state(com_pos=(0, 0, 0.55), params=params), (10, 1))
    feet = srbm.standing_feet((0, 0, 0.55))
    theta = MpcTheta.nominal()
    prob = build_qp(x0, x_ref, [(True, True)] * 10, feet, theta, MpcConfig(), params)
    sol = solve_mpc(prob)
    pj = differentiate_policy(prob, sol)
    assert not pj.low_confidence
    for i in range(12):
        delta = 1e-5 * theta.r_diag[i]
        us = []
        for s in (1, -1):
            r = np.array(theta.r_diag)
            r[i] += s * delta
            p = build_qp(x0, x_ref, [(True, True)] * 10, feet, MpcTheta(theta.q_diag, r),
                         MpcConfig(), params)
            sp = solve_mpc(p)
            assert mpc_mod.active_signature(p, sp) == mpc_mod.active_signature(prob, sol)
            us.append(sp.u[:12])
        fd = (us[0] - us[1]) / (2 * delta)
        col = pj.du_dtheta[:, 12 + i]
        assert np.abs(col - fd).max() <= 1e-5 * max(np.abs(fd).max(), 1e-9 * np.abs(pj.du_dtheta).max())


def test_policy_jacobians_match_fd_on_walking_states(walking):
    setup, inst = walking
    th = MpcTheta.nominal().flat
    checked = 0
    for item in inst[::4]:
        _, _, prob, sol = solve_u0(item, th, setup)
        pj = differentiate_policy(prob, sol)
        d_x, d_th, d_ft, stable = policy_fd(item, th, setup)
        if not stable:
            continue
        checked += 1
        assert fro_rel(pj.du_dx, d_x) < 1e-3
        assert fro_rel(pj.du_dtheta, d_th) < 1e-3
        assert fro_rel(pj.du_dfeet, d_ft) < 1e-3
    assert checked >= 3


def test_singular_kkt_falls_back():
    K = np.zeros((3, 3))
    assert mpc_mod._solve_kkt_directions(K, np.ones((3, 1))) is None
    K = np.diag([1.0, 2.0, 3.0])
    np.testing.assert_allclose(mpc_mod._solve_kkt_directions(K, np.ones((3, 1))).ravel(),
                               [1, 0.5, 1 / 3])


def test_theta_bounds():
    assert MpcTheta.nominal().in_bounds()
    assert not MpcTheta([1e7] + [1.0] * 11, [1e-3] * 12).in_bounds()
    lo, hi = mpc_mod.theta_bounds()
    assert lo[0] == 1e-4 and hi[0] == 1e6 and lo[-1] == 1e-8 and hi[-1] == 1e2
