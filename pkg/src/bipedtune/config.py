"""Experiment configuration: nested sections with units in the key names.

A config is stored as YAML.  Every key carries its unit suffix (``_s``,
``_m``, ``_kg``, ``_n``, ``_nm``, ...) so physical constants can be audited
from the file alone.  ``config_hash`` fingerprints the canonical JSON form and
``substream_seed`` derives every random stream from the single global seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

import numpy as np
import yaml

from . import gait as gait_mod
from .closed_loop import SimSetup
from .difftune import TuneConfig
from .grfm_net import TrainConfig
from .mpc import N_Q, N_R, Q_BOUNDS, R_BOUNDS, MpcConfig, MpcTheta
from .plant import ActuatorDistortion
from .srbm import RobotParams


class ConfigError(ValueError):
    pass


@dataclass
class RobotSection:
    mass_kg: float = 12.0
    body_inertia_diag_kgm2: list = field(default_factory=lambda: [0.168, 0.117, 0.064])
    toe_length_m: float = 0.09
    heel_length_m: float = 0.06
    friction_mu: float = 0.5
    torsional_mu_m: float = 0.05
    f_max_n: float = 500.0
    gravity_z_mps2: float = -9.81


@dataclass
class GaitSection:
    step_duration_s: float = 0.3
    settle_s: float = 0.3
    phase_offset: list = field(default_factory=lambda: [0.0, 0.5])
    hip_offset_m: float = 0.047


@dataclass
class TrajectorySection:
    presets: list = field(default_factory=lambda: list(gait_mod.PRESETS))
    duration_s: float = 4.0
    com_height_m: float = 0.55


@dataclass
class MpcSection:
    horizon_steps: int = 10
    dt_s: float = 0.04
    qp_tol: float = 1e-10
    q_nominal: list = field(default_factory=lambda: list(MpcTheta.nominal().q_diag))
    r_nominal: list = field(default_factory=lambda: list(MpcTheta.nominal().r_diag))


@dataclass
class PlantSection:
    identity: bool = False
    lag: float = 0.6
    gain_range: list = field(default_factory=lambda: [0.85, 1.1])
    deadband_force_n: float = 2.0
    deadband_moment_nm: float = 0.2
    saturation_force_n: float = 500.0
    saturation_moment_nm: float = 30.0
    noise_force_n: float = 1.5
    noise_moment_nm: float = 0.15
    substeps: int = 1


@dataclass
class DataSection:
    n_rollouts: int = 60
    speed_scale_range: list = field(default_factory=lambda: [0.8, 1.2])
    yaw_scale_range: list = field(default_factory=lambda: [0.8, 1.2])
    skip_settle: bool = False


@dataclass
class TrainSection:
    hidden_sizes: list = field(default_factory=lambda: [64, 64, 64])
    layer_norm: bool = True
    learning_rate: float = 1e-3
    l2_weight: float = 1e-3
    epochs: int = 200
    batch_size: int = 256
    val_fraction: float = 0.1
    ema_decay: float = 0.99


@dataclass
class TuneSection:
    alpha1: float = 1e5
    alpha2: float = 2e5
    beta_q: float = 0.05
    beta_r: float = 0.08
    iterations: int = 10
    step_mode: str = "relative"
    q_bounds: list = field(default_factory=lambda: list(Q_BOUNDS))
    r_bounds: list = field(default_factory=lambda: list(R_BOUNDS))


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    robot: RobotSection = field(default_factory=RobotSection)
    gait: GaitSection = field(default_factory=GaitSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    mpc: MpcSection = field(default_factory=MpcSection)
    plant: PlantSection = field(default_factory=PlantSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    tune: TuneSection = field(default_factory=TuneSection)

    # ---- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        return _build(cls, d or {}, "config")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                d = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if d is not None and not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = cls.from_dict(d)
        cfg.validate()
        return cfg

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_yaml())

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, **sections) -> "ExperimentConfig":
        out = self
        for name, values in sections.items():
            out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out

    # ---- derived objects --------------------------------------------------

    def validate(self):
        for name in self.trajectory.presets:
            if name not in gait_mod.PRESETS:
                raise ConfigError(f"unknown trajectory preset {name!r}")
        if len(self.mpc.q_nominal) != N_Q or len(self.mpc.r_nominal) != N_R:
            raise ConfigError(f"mpc.q_nominal and mpc.r_nominal need {N_Q} and {N_R} entries")
        try:
            self.robot_params()
            self.sim_setup()
            self.tune_config("straight", False)
            self.train_config("force")
            self.distortion()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def substream_seed(self, name: str) -> int:
        """Integer seed of the named random stream, derived from the global seed."""
        key = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(key,))
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def robot_params(self) -> RobotParams:
        r = self.robot
        return RobotParams(mass_kg=r.mass_kg,
                           body_inertia_kgm2=tuple(map(tuple, np.diag(r.body_inertia_diag_kgm2))),
                           toe_length_m=r.toe_length_m, heel_length_m=r.heel_length_m,
                           friction_mu=r.friction_mu, torsional_mu_m=r.torsional_mu_m,
                           f_max_n=r.f_max_n, gravity_mps2=(0.0, 0.0, r.gravity_z_mps2))

    def sim_setup(self) -> SimSetup:
        g = self.gait
        return SimSetup(params=self.robot_params(),
                        gait=gait_mod.GaitSchedule(step_duration_s=g.step_duration_s,
                                                   settle_s=g.settle_s,
                                                   phase_offset=tuple(g.phase_offset)),
                        mpc=MpcConfig(horizon=self.mpc.horizon_steps, dt_s=self.mpc.dt_s,
                                      qp_tol=self.mpc.qp_tol),
                        hip_offset_m=g.hip_offset_m, plant_substeps=self.plant.substeps)

    def theta_nominal(self) -> MpcTheta:
        return MpcTheta(list(self.mpc.q_nominal), list(self.mpc.r_nominal))

    def trajectory_spec(self, name: str) -> gait_mod.TrajectorySpec:
        return gait_mod.preset(name, self.trajectory.duration_s, self.trajectory.com_height_m)

    def distortion(self) -> ActuatorDistortion:
        p = self.plant
        if p.identity:
            return ActuatorDistortion.identity()
        return ActuatorDistortion.sampled(
            self.substream_seed("plant.distortion"), lag=p.lag, gain_range=tuple(p.gain_range),
            deadband_force_n=p.deadband_force_n, deadband_moment_nm=p.deadband_moment_nm,
            saturation_force_n=p.saturation_force_n, saturation_moment_nm=p.saturation_moment_nm,
            noise_force_n=p.noise_force_n, noise_moment_nm=p.noise_moment_nm)

    def layer_sizes(self) -> tuple:
        return (18, *self.train.hidden_sizes, 6)

    def train_config(self, group: str) -> TrainConfig:
        t = self.train
        return TrainConfig(learning_rate=t.learning_rate, l2_weight=t.l2_weight, epochs=t.epochs,
                           batch_size=t.batch_size, val_fraction=t.val_fraction,
                           ema_decay=t.ema_decay, seed=self.substream_seed(f"train.{group}"))

    def tune_config(self, trajectory: str, use_grfm_net: bool) -> TuneConfig:
        t = self.tune
        lo = [t.q_bounds[0]] * N_Q + [t.r_bounds[0]] * N_R
        hi = [t.q_bounds[1]] * N_Q + [t.r_bounds[1]] * N_R
        return TuneConfig(alpha1=t.alpha1, alpha2=t.alpha2, beta_q=t.beta_q, beta_r=t.beta_r,
                          iterations=t.iterations, theta_init=self.theta_nominal(),
                          theta_lower=tuple(lo), theta_upper=tuple(hi),
                          use_grfm_net=use_grfm_net, trajectory=self.trajectory_spec(trajectory),
                          step_mode=t.step_mode)


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in d:
            continue
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), d[name], f"{where}.{name}")
        else:
            kwargs[name] = _coerce(d[name], default, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        if default and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in default):
            kind = float if any(isinstance(v, float) for v in default) else int
            try:
                return [kind(v) for v in value]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}: expected numbers") from exc
        return list(value)
    return value
