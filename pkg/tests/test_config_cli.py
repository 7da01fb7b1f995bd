import json
import os

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from bipedtune import pipeline
from bipedtune.cli import main
from bipedtune.config import ConfigError, ExperimentConfig
from bipedtune.mpc import MpcTheta
from bipedtune.plant import file_sha256

from tiny import tiny_config

ROLL_DETUNED = MpcTheta([1e-4, 100, 100] + [100] * 3 + [1e-4, 1, 1] + [1] * 3, [1e-3] * 12)


@pytest.fixture
def tiny(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    path = tmp_path / "tiny.yaml"
    cfg.save(path)
    return cfg, str(path)


def _rows(path):
    return pipeline.read_csv(path)[1]


# ---- config ------------------------------------------------------------------

def test_yaml_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path).with_overrides(robot={"mass_kg": 11.5}, plant={"identity": True})
    cfg.save(tmp_path / "c.yaml")
    back = ExperimentConfig.load(tmp_path / "c.yaml")
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    assert back.config_hash() != ExperimentConfig().config_hash()


def test_every_physical_key_has_a_unit_suffix():
    units = ("_s", "_m", "_kg", "_n", "_nm", "_kgm2", "_mps2")
    for name in ("robot", "gait", "trajectory"):
        section = ExperimentConfig().to_dict()[name]
        for key in section:
            if key in ("friction_mu", "phase_offset", "presets"):
                continue
            assert key.endswith(units), key


def test_unknown_key_and_type_errors(tmp_path):
    d = ExperimentConfig().to_dict()
    d["robot"]["mass"] = 12.0
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump(d))
    with pytest.raises(ConfigError, match="mass"):
        ExperimentConfig.load(p)
    for section, key, value in (("data", "n_rollouts", 2.5), ("plant", "identity", "yes"),
                                ("robot", "mass_kg", "heavy"), ("train", "hidden_sizes", 8)):
        d = ExperimentConfig().to_dict()
        d[section][key] = value
        p.write_text(yaml.safe_dump(d))
        with pytest.raises(ConfigError):
            ExperimentConfig.load(p)
    p.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(trajectory={"presets": ["zigzag"]}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(mpc={"q_nominal": [1.0] * 11}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(robot={"mass_kg": -1.0}).validate()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_substreams_are_deterministic_and_distinct(seed):
    a, b = ExperimentConfig(seed=seed), ExperimentConfig(seed=seed)
    names = ("data.collect", "plant.distortion", "train.force", "train.moment")
    sa = [a.substream_seed(n) for n in names]
    assert sa == [b.substream_seed(n) for n in names]
    assert len(set(sa)) == len(names)
    assert ExperimentConfig(seed=seed ^ 1).substream_seed("data.collect") != sa[0]


# ---- cli ---------------------------------------------------------------------

def test_write_config_and_usage_errors(tmp_path, capsys):
    out = tmp_path / "default.yaml"
    assert main(["write-config", str(out)]) == 0
    assert ExperimentConfig.load(out) == ExperimentConfig()
    run = ["--output-dir", str(tmp_path / "r")]
    assert main(["simulate", "--trajectory", "zigzag"] + run) == 2
    assert main(["simulate", "--plant", "--nets", "identity"] + run) == 2
    assert main(["tune", "--without-net", "--trajectory", "zigzag"] + run) == 2
    assert main(["compare", "--theta", "no-separator"] + run) == 2
    with pytest.raises(SystemExit) as info:
        main(["tune"])
    assert info.value.code == 2


def test_missing_files_are_io_errors(tiny):
    cfg, path = tiny
    assert main(["train-grfm", "--config", path]) == 4
    assert main(["tune", "--with-net", "--config", path]) == 4
    assert main(["simulate", "--config", path, "--theta", "/nonexistent/theta.json"]) == 4
    assert main(["collect-data", "--config", path, "--verify"]) == 4
    assert main(["simulate", "--config", "/nonexistent.yaml"]) == 4


def test_zero_rollouts_is_a_config_error(tiny, tmp_path):
    cfg, _ = tiny
    p = tmp_path / "zero.yaml"
    cfg.with_overrides(data={"n_rollouts": 0}).save(p)
    assert main(["collect-data", "--config", str(p)]) == 2


def test_fall_exit_status(tiny, tmp_path):
    cfg, path = tiny
    theta = tmp_path / "detuned.json"
    pipeline.save_theta(theta, ROLL_DETUNED, cfg)
    assert main(["simulate", "--config", path, "--theta", str(theta)]) == 3
    man = json.loads((tmp_path / "run" / "manifests" / "simulate_straight_plant.json").read_text())
    assert man["fell"] is True


def test_simulate_csv_and_identity_plant(tiny, tmp_path):
    cfg, path = tiny
    assert main(["simulate", "--config", path, "--nominal", "--nets", "identity"]) == 0
    assert main(["simulate", "--config", path, "--nominal", "--nets", "identity", "--verify"]) == 0
    header, rows = pipeline.read_csv(tmp_path / "run" / "simulate" / "straight_nominal_identity_net.csv")
    assert len(rows) == 25
    assert header == pipeline.rollout_header()
    # with the distortion switched off the plant rollout is the same row for row
    ident = tmp_path / "ident.yaml"
    cfg.with_overrides(plant={"identity": True}).save(ident)
    assert main(["simulate", "--config", str(ident), "--plant"]) == 0
    plant_rows = _rows(tmp_path / "run" / "simulate" / "straight_plant.csv")
    np.testing.assert_array_equal(np.array(rows, float), np.array(plant_rows, float))


def test_pipeline_commands_on_tiny_config(tiny, tmp_path):
    cfg, path = tiny
    run = tmp_path / "run"
    assert main(["collect-data", "--config", path]) == 0
    header, rows = pipeline.read_csv(run / "data" / "grfm_dataset.csv")
    assert len(rows) == 4 * 25
    assert main(["train-grfm", "--config", path]) == 0
    assert len(_rows(run / "models" / "loss_curve.csv")) == 2 * (100 + 1)

    # the tuner without the net leaves the trained models untouched and says so
    assert main(["tune", "--without-net", "--config", path]) == 0
    for name in ("straight", "c_shape"):
        d = run / "tune" / f"{name}_without_net"
        assert len(_rows(d / "history.csv")) == 1 + 1
        theta, meta = pipeline.load_theta(d / "theta.json")
        assert theta.in_bounds()
        assert sorted(meta["ignored_model_files"]) == ["grfm_force.npz", "grfm_moment.npz"]
    assert main(["tune", "--with-net", "--config", path, "--trajectory", "straight"]) == 0
    meta = pipeline.load_theta(run / "tune" / "straight_with_net" / "theta.json")[1]
    assert set(meta["model_sha256"]) == {"grfm_force.npz", "grfm_moment.npz"}

    # the reference set reports no reduction; the same weights twice give equal rows
    nominal = tmp_path / "nominal.json"
    pipeline.save_theta(nominal, cfg.theta_nominal(), cfg)
    assert main(["compare", "--config", path, "--theta", f"again:straight={nominal}",
                 "--theta", f"again:c_shape={nominal}"]) == 0
    header, rows = pipeline.read_csv(run / "compare" / "report.csv")
    assert len(rows) == 4
    for a, b in (rows[0:2], rows[2:4]):
        assert float(a[header.index("reduction_L_pct")]) == 0.0
        assert a[2:] == b[2:]
    for name in ("collect-data", "train-grfm", "tune_without_net", "tune_with_net", "compare"):
        pipeline.verify_manifest(cfg, name)

    # a tampered output no longer verifies
    with open(run / "compare" / "report.csv", "a") as fh:
        fh.write("x\n")
    assert main(["compare", "--config", path, "--verify"]) == 4


def test_compare_rejects_mismatched_sets(tiny, tmp_path):
    cfg, _ = tiny
    with pytest.raises(ConfigError):
        pipeline.compare(cfg, {"nominal": {"straight": None},
                               "other": {"straight": None, "c_shape": None}})


def test_outputs_are_reproducible(tiny):
    cfg, path = tiny
    digests = []
    for _ in range(2):
        assert main(["collect-data", "--config", path]) == 0
        assert main(["simulate", "--config", path]) == 0
        digests.append([file_sha256(os.path.join(cfg.output_dir, p)) for p in
                        ("data/grfm_dataset.csv", "simulate/straight_plant.csv")])
    assert digests[0] == digests[1]
