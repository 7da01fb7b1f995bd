import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bipedtune import gait
from bipedtune.gait import GaitSchedule, contact_at, raibert_placement


def test_contact_examples():
    g = GaitSchedule(step_duration_s=0.3, settle_s=0.3)
    assert contact_at(0.0, g) == (True, True)
    assert contact_at(0.29, g) == (True, True)
    assert contact_at(0.45, g) == (True, False)
    assert contact_at(0.75, g) == (False, True)


@settings(max_examples=200, deadline=None)
@given(t=st.floats(0.3, 50.0))
def test_contact_periodic_and_single_support(t):
    g = GaitSchedule()
    c = contact_at(t, g)
    assert c == contact_at(t + 2 * g.step_duration_s, g)
    assert sum(c) == 1


def test_contact_rejects_time_before_start():
    with pytest.raises(ValueError):
        contact_at(-0.1, GaitSchedule())


@pytest.mark.parametrize("kwargs", [{"step_duration_s": 0}, {"settle_s": -1},
                                    {"phase_offset": (0.0, 1.0)}])
def test_gait_validation(kwargs):
    with pytest.raises(ValueError):
        GaitSchedule(**kwargs)


def test_raibert_examples():
    np.testing.assert_allclose(raibert_placement((0, 0, 0.55), (0.5, 0, 0), 0.3), (0.075, 0, 0))
    np.testing.assert_allclose(raibert_placement((1, 2, 0.55), (0, 0, 0), 0.3, 0.047),
                               (1, 2.047, 0))
    p = raibert_placement((0, 0, 0.55), (0.5, 0.2, 0), 0.4)
    np.testing.assert_allclose(p[:2], (0.1, 0.04))
    with pytest.raises(ValueError):
        raibert_placement((0, 0, 0), (0, 0, 0), 0.0)


def test_raibert_jacobian_fd():
    rng = np.random.default_rng(0)
    x = rng.normal(size=15)
    J = gait.raibert_jacobian(x[2], 0.3, -0.047)
    h = 1e-6
    f = lambda z: raibert_placement(z[3:6], z[9:12], 0.3, -0.047, z[2])
    fd = np.stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(15)], axis=1)
    np.testing.assert_allclose(J, fd, atol=1e-8)


def test_reference_examples(params):
    s = gait.preset("s_shape")
    assert gait.reference_state(s, 2.0)[2] == pytest.approx(np.pi)
    c = gait.preset("c_shape")
    assert gait.reference_state(c, 4.0)[2] == pytest.approx(np.pi)
    st_ = gait.reference_state(gait.preset("straight"), 1.0)
    assert st_[3] == pytest.approx(0.5) and st_[2] == 0.0
    x = gait.reference_state(c, 1.3, params)
    np.testing.assert_array_equal(x[12:15], params.gravity)
    assert x[0] == x[1] == 0.0 and x[5] == 0.55
    np.testing.assert_allclose(x[6:9], (0, 0, 0.25 * np.pi))


def test_c_shape_is_exact_semicircle():
    c = gait.preset("c_shape")
    radius = 0.25 / (0.25 * np.pi)
    assert radius == pytest.approx(0.318, abs=5e-4)
    center = np.array([0.0, radius])
    pts = gait.generate_reference(c, 0.0, 101, 0.04)
    d = np.linalg.norm(pts[:, 3:5] - center, axis=1)
    assert np.abs(d - radius).max() < 1e-9
    np.testing.assert_allclose(pts[-1, 3:5], [0.0, 2 * radius], atol=1e-12)


def test_reference_continuity_and_velocity():
    s = gait.preset("s_shape")
    ts = np.linspace(0, 4, 4001)
    refs = np.array([gait.reference_state(s, t) for t in ts])
    assert np.abs(np.diff(refs[:, 2])).max() < 0.5 * np.pi * 1e-3 + 1e-12
    assert np.abs(np.diff(refs[:, 3:5], axis=0)).max() < 0.5 * 1e-3 + 1e-12
    # position integrates the reference velocity
    mid = (refs[1:, 9:11] + refs[:-1, 9:11]) / 2
    np.testing.assert_allclose(np.diff(refs[:, 3:5], axis=0), mid * 1e-3, atol=1e-8)


def test_presets_and_unknown():
    assert gait.preset("straight").yaw_rate(1.0) == 0.0
    assert gait.preset("s_shape").yaw_rate(1.0) == pytest.approx(0.5 * np.pi)
    assert gait.preset("s_shape").yaw_rate(3.0) == pytest.approx(-0.5 * np.pi)
    assert gait.preset("c_shape").v_x_des_mps == 0.25
    with pytest.raises(KeyError):
        gait.preset("zigzag")
