from dataclasses import replace

import numpy as np
import pytest

from bipedtune import gait as gait_mod
from bipedtune import grfm_net as gn
from bipedtune import plant, srbm
from bipedtune.closed_loop import is_fallen, run_closed_loop
from bipedtune.mpc import MpcTheta
from bipedtune.plant import ActuatorDistortion, distort

SHORT = replace(gait_mod.preset("c_shape"), duration_s=1.0)
ROLL_DETUNED = MpcTheta([1e-4, 100, 100] + [100] * 3 + [1e-4, 1, 1] + [1] * 3, [1e-3] * 12)


def _window(rng):
    return rng.normal(0, 40, (3, 12))


def test_identity_distortion_passes_newest_command():
    w = _window(np.random.default_rng(0))
    np.testing.assert_array_equal(distort(w, ActuatorDistortion.identity(),
                                          np.random.default_rng(1)), w[-1])


def test_gain_example():
    w = np.zeros((3, 12))
    w[:, 2] = 100.0
    model = ActuatorDistortion(gain=0.9)
    assert distort(w, model)[2] == pytest.approx(90.0)


def test_lag_of_held_command_converges():
    model = ActuatorDistortion(lag=0.5, gain=1.05)
    u = np.random.default_rng(2).normal(0, 50, 12)
    cmds = [np.zeros(12)] * 3 + [u] * 10
    for j in range(2, len(cmds)):
        eff = distort(np.array(cmds[j - 2:j + 1]), model)
    assert np.abs(eff - 1.05 * u).max() <= 2.0 ** -10 * np.abs(1.05 * u).max()
    # a step response is a convex blend of old and new commands
    step = distort(np.array([np.zeros(12), u, u]), model)
    np.testing.assert_allclose(step, 1.05 * 0.75 * u, rtol=1e-14)


def test_deadband_saturation_and_quiet_zero_channels():
    model = ActuatorDistortion.sampled(3)
    w = np.zeros((3, 12))
    w[:, 2] = 1000.0
    w[:, 1] = 1.0           # inside the deadband
    rng = np.random.default_rng(4)
    eff = distort(w, model, rng)
    assert abs(eff[2]) <= 500.0 + 5 * 1.5 * 2   # saturated before noise
    assert eff[1] == 0.0
    zero = np.zeros(12)
    assert not (distort(np.zeros((3, 12)), model, rng) != zero).any()


def test_distortion_validation_and_dict_roundtrip():
    with pytest.raises(ValueError):
        ActuatorDistortion(lag=1.0)
    with pytest.raises(ValueError):
        ActuatorDistortion(saturation=0.0)
    with pytest.raises(ValueError):
        distort(np.zeros((2, 12)), ActuatorDistortion())
    m = ActuatorDistortion.sampled(5)
    assert ActuatorDistortion.from_dict(m.to_dict()) == m
    assert ActuatorDistortion.from_dict(ActuatorDistortion().to_dict()) == ActuatorDistortion()
    assert ActuatorDistortion.sampled(5) == m and ActuatorDistortion.sampled(6) != m
    assert all(0.85 <= g <= 1.1 for g in m.gain)


def test_distort_is_causal():
    model = ActuatorDistortion.sampled(7)
    rng = np.random.default_rng(8)
    cmds = rng.normal(0, 50, (20, 12))

    def effects(c):
        r = np.random.default_rng(9)
        return np.array([distort(np.array([c[max(j - 2, 0)], c[max(j - 1, 0)], c[j]]), model, r)
                         for j in range(len(c))])

    base = effects(cmds)
    later = cmds.copy()
    later[11:] += rng.normal(0, 50, (9, 12))
    np.testing.assert_array_equal(effects(later)[:11], base[:11])


def test_plant_step_free_fall_and_swing_gating(params):
    x = srbm.make_state(com_pos=(0, 0, 0.55))
    feet = srbm.standing_feet(x[3:6])
    x1, eff = plant.plant_step(x, np.zeros((3, 12)), feet, ActuatorDistortion(), params, 0.04)
    assert x1[11] == pytest.approx(-9.81 * 0.04)
    w = np.tile(np.r_[0, 0, 60, 0, 0, 60, np.zeros(6)], (3, 1))
    feet.in_stance = (True, False)
    _, eff = plant.plant_step(x, w, feet, ActuatorDistortion(), params, 0.04)
    assert eff[2] == 60.0 and eff[5] == 0.0
    x2, _ = plant.plant_step(x, np.zeros((3, 12)), feet, ActuatorDistortion(), params, 0.04,
                             substeps=4)
    assert x2[11] == pytest.approx(-9.81 * 0.04)


def test_identity_plant_equals_nominal_simulator(theta, setup):
    spec = gait_mod.preset("s_shape")
    nominal = run_closed_loop(theta, spec, setup)
    plant_log = plant.simulate_plant(theta, spec, setup, ActuatorDistortion.identity(), seed=3)
    assert nominal.n_steps == plant_log.n_steps == 100
    assert np.abs(nominal.x - plant_log.x).max() < 1e-12
    np.testing.assert_array_equal(nominal.u, plant_log.u)


def test_fall_flag(setup):
    x = srbm.make_state(euler=(0.61, 0, 0), com_pos=(0, 0, 0.55))
    assert is_fallen(x, setup)
    assert not is_fallen(srbm.make_state(euler=(0.59, 0, 0), com_pos=(0, 0, 0.55)), setup)
    log = plant.simulate_plant(ROLL_DETUNED, gait_mod.preset("straight"), setup,
                               ActuatorDistortion.default(0), seed=0)
    assert log.fell and log.n_steps < 100
    assert abs(log.x[-1, 0]) > 0.6


def test_collect_dataset_deterministic_and_contiguous(tmp_path, theta, setup):
    args = ([SHORT, replace(gait_mod.preset("straight"), duration_s=1.0)], theta,
            ActuatorDistortion.default(1), 3, 11, setup)
    ds, n_fallen = plant.collect_dataset(*args)
    assert n_fallen == 0
    assert len(ds) == 3 * 25
    for r in np.unique(ds.rollout):
        idx = np.flatnonzero(ds.rollout == r)
        np.testing.assert_array_equal(ds.step[idx], np.arange(idx.size))
        # consecutive windows overlap: newest two commands become the oldest two
        np.testing.assert_array_equal(ds.windows[idx[1:], 0], ds.windows[idx[:-1], 1])
        np.testing.assert_array_equal(ds.windows[idx[1:], 1], ds.windows[idx[:-1], 2])
    paths = []
    for k in range(2):
        ds_k, _ = plant.collect_dataset(*args)
        p = tmp_path / f"d{k}.csv"
        plant.write_dataset(ds_k, p, tmp_path / f"d{k}.meta.json")
        paths.append(p)
    assert plant.file_sha256(paths[0]) == plant.file_sha256(paths[1])
    assert (tmp_path / "d0.meta.json").read_bytes() == (tmp_path / "d1.meta.json").read_bytes()
    with open(paths[0]) as fh:
        assert sum(1 for _ in fh) == len(ds) + 1

    back = plant.read_dataset(paths[0], tmp_path / "d0.meta.json")
    np.testing.assert_array_equal(back.windows, ds.windows)
    np.testing.assert_array_equal(back.effects, ds.effects)
    np.testing.assert_array_equal(back.contacts, ds.contacts)
    assert back.meta["seed"] == 11

    skipped, _ = plant.collect_dataset(*args, skip_settle=True)
    assert len(skipped) == 3 * (25 - 8)


def test_collect_dataset_rejects_zero_rollouts(theta):
    with pytest.raises(ValueError):
        plant.collect_dataset([SHORT], theta, ActuatorDistortion(), 0, 0)


def test_dataset_header_layout():
    h = plant.dataset_header()
    assert h[:6] == ["rollout", "trajectory", "step", "t_s", "contact0", "contact1"]
    assert h[6] == "cmd[k-2]_F0x" and h[18] == "cmd[k-1]_F0x" and h[30] == "cmd[k]_F0x"
    assert h[-1] == "eff_M1z" and len(h) == 6 + 48


def test_fidelity_metrics_directions(theta, setup):
    log = plant.simulate_plant(theta, SHORT, setup, ActuatorDistortion.identity(), seed=0)
    fm = plant.fidelity_metrics(log, gn.identity_params("force"), gn.identity_params("moment"))
    for g in ("force", "moment"):
        assert fm[g]["mse_cmd_vs_plant"] < 1e-20 and fm[g]["mse_net_vs_plant"] < 1e-20
    rng = np.random.default_rng(0)
    rand = plant.fidelity_metrics(
        plant.simulate_plant(theta, SHORT, setup, ActuatorDistortion.default(0), seed=0),
        gn.init_params((18, 64, 64, 64, 6), rng, "force"),
        gn.init_params((18, 64, 64, 64, 6), rng, "moment"))
    assert not rand["force"]["pass"] and not rand["moment"]["pass"]
    assert rand["force"]["mse_net_vs_plant"] > 10 * rand["force"]["mse_cmd_vs_plant"]
    assert fm["force"]["pass"] is False     # equal errors are not an improvement
    log.contacts[:] = False
    with pytest.raises(ValueError):
        plant.fidelity_metrics(log, gn.identity_params("force"), gn.identity_params("moment"))
