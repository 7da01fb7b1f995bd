"""Surrogate "physical" plant: the SRBM driven through a hidden actuator distortion.

The distortion stands in for everything between a commanded wrench and the
wrench the ground actually applies (actuator lag, transmission losses,
stiction, saturation, sensor noise).  Its form is a modelling choice for the
surrogate, not a claim about any particular robot.

Per channel, for a command window ``[u_{j-2}, u_{j-1}, u_j]``::

    y  <- u_{j-2};  y <- a y + (1 - a) u_{j-1};  y <- a y + (1 - a) u_j
    effect = clip(deadband(gain * y), -sat, sat) + noise   (noise only outside the deadband)
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gait as gait_mod
from .closed_loop import (FORCE_CH, MOMENT_CH, WINDOW, SimSetup, foot_channels,
                          run_closed_loop)
from .grfm_net import MlpParams, forward
from .mpc import MpcTheta
from .srbm import NU, FootConfig, RobotParams, continuous_dynamics

CHANNELS = ("F0x", "F0y", "F0z", "F1x", "F1y", "F1z",
            "M0x", "M0y", "M0z", "M1x", "M1y", "M1z")


@dataclass(frozen=True)
class ActuatorDistortion:
    lag: tuple = (0.0,) * NU
    gain: tuple = (1.0,) * NU
    deadband: tuple = (0.0,) * NU
    saturation: tuple = (np.inf,) * NU
    noise_std: tuple = (0.0,) * NU
    seed: int = 0

    def __post_init__(self):
        for name in ("lag", "gain", "deadband", "saturation", "noise_std"):
            v = tuple(float(a) for a in np.broadcast_to(getattr(self, name), (NU,)))
            object.__setattr__(self, name, v)
        if any(not 0.0 <= a < 1.0 for a in self.lag):
            raise ValueError("lag coefficients must lie in [0, 1)")
        if any(d < 0 for d in self.deadband) or any(s <= 0 for s in self.saturation):
            raise ValueError("deadband must be >= 0 and saturation > 0")

    @classmethod
    def identity(cls) -> "ActuatorDistortion":
        return cls()

    @classmethod
    def sampled(cls, seed: int, lag: float = 0.6, gain_range=(0.85, 1.1),
                deadband_force_n: float = 2.0, deadband_moment_nm: float = 0.2,
                saturation_force_n: float = 500.0, saturation_moment_nm: float = 30.0,
                noise_force_n: float = 1.5, noise_moment_nm: float = 0.15) -> "ActuatorDistortion":
        """Shared scalar knobs with per-channel gains drawn uniformly from ``gain_range``."""
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xD15,)))
        gain = rng.uniform(gain_range[0], gain_range[1], NU)
        return cls(lag=(lag,) * NU, gain=tuple(gain),
                   deadband=(deadband_force_n,) * 6 + (deadband_moment_nm,) * 6,
                   saturation=(saturation_force_n,) * 6 + (saturation_moment_nm,) * 6,
                   noise_std=(noise_force_n,) * 6 + (noise_moment_nm,) * 6, seed=seed)

    @classmethod
    def default(cls, seed: int = 0, params: RobotParams | None = None) -> "ActuatorDistortion":
        params = params or RobotParams()
        return cls.sampled(seed, saturation_force_n=params.f_max_n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["saturation"] = [s if np.isfinite(s) else "inf" for s in d["saturation"]]
        return d

    @classmethod
    def from_dict(cls, d) -> "ActuatorDistortion":
        d = dict(d)
        d["saturation"] = [float(s) for s in d.get("saturation", [np.inf] * NU)]
        return cls(**d)


def distort(u_hist, model: ActuatorDistortion, rng: np.random.Generator | None = None):
    """Realised wrench for a (3, 12) command window, oldest first."""
    u_hist = np.asarray(u_hist, dtype=float)
    if u_hist.shape != (WINDOW, NU):
        raise ValueError(f"command window must have shape ({WINDOW}, {NU})")
    a = np.asarray(model.lag)
    y = u_hist[0].copy()
    for k in range(1, WINDOW):
        y = a * y + (1.0 - a) * u_hist[k]
    v = np.asarray(model.gain) * y
    v = np.sign(v) * np.maximum(np.abs(v) - np.asarray(model.deadband), 0.0)
    sat = np.asarray(model.saturation)
    v = np.clip(v, -sat, sat)
    std = np.asarray(model.noise_std)
    if rng is not None and np.any(std > 0):
        noise = rng.normal(0.0, 1.0, NU) * std
        v = v + np.where(v != 0.0, noise, 0.0)
    return v


class PlantActuation:
    """Distortion with its own random stream; not differentiable."""

    differentiable = False

    def __init__(self, model: ActuatorDistortion, rng: np.random.Generator | None = None):
        self.model = model
        self.rng = rng if rng is not None else np.random.default_rng(model.seed)

    def effect(self, window):
        return distort(window, self.model, self.rng)

    def jacobian(self, window):
        raise TypeError("the plant is not differentiable")


def plant_step(x, u_hist, feet: FootConfig, model: ActuatorDistortion, params: RobotParams,
               dt: float, rng=None, substeps: int = 1):
    """Advance the plant one control period with zero-order hold on the effect.

    Swing-foot channels (``feet.in_stance``) act with zero wrench.  Returns
    ``(x_next, effect)``.
    """
    effect = distort(u_hist, model, rng)
    for i in range(2):
        if not feet.in_stance[i]:
            effect[foot_channels(i)] = 0.0
    x = np.asarray(x, dtype=float)
    h = dt / substeps
    for _ in range(substeps):
        x = x + h * continuous_dynamics(x, effect, feet, params)
    return x, effect


def simulate_plant(theta: MpcTheta, spec: gait_mod.TrajectorySpec, setup: SimSetup,
                   model: ActuatorDistortion, seed: int, n_steps=None):
    """Closed loop on the plant with a dedicated noise stream."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x9A7,)))
    return run_closed_loop(theta, spec, setup, PlantActuation(model, rng), n_steps=n_steps)


@dataclass
class GrfmDataset:
    windows: np.ndarray                  # (n, 3, 12) command windows, oldest first
    effects: np.ndarray                  # (n, 12)
    contacts: np.ndarray                 # (n, 2)
    rollout: np.ndarray                  # (n,)
    trajectory: list                     # (n,) trajectory kind per record
    step: np.ndarray                     # (n,)
    t: np.ndarray                        # (n,)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.effects.shape[0])

    def group_arrays(self, group: str):
        """``(X, Y)`` for one channel group: X is (n, 18) oldest-first, Y is (n, 6)."""
        ch = FORCE_CH if group == "force" else MOMENT_CH
        return self.windows[:, :, ch].reshape(len(self), -1), self.effects[:, ch]


def collect_dataset(specs, theta: MpcTheta, model: ActuatorDistortion, n_rollouts: int,
                    seed: int, setup: SimSetup | None = None, speed_range=(0.8, 1.2),
                    yaw_range=(0.8, 1.2), theta_spread: float = 0.0, skip_settle: bool = False):
    """Closed-loop plant rollouts around the given trajectories.

    Each rollout scales speed and yaw rate by factors drawn from the given
    ranges and, when ``theta_spread > 0``, multiplies every weight by
    ``exp(N(0, theta_spread))``.  Every control step yields one record,
    including the padded start-up windows, because the learned model meets the
    same windows in simulation; ``skip_settle`` drops the initial double-stance
    settle instead.  Fallen rollouts are dropped.  Returns
    ``(dataset, n_fallen)``.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    setup = setup or SimSetup()
    specs = list(specs)
    parts = []
    n_fallen = 0
    for r in range(n_rollouts):
        ss = np.random.SeedSequence(seed, spawn_key=(0xC011, r))
        rng_cfg, rng_noise = [np.random.default_rng(s) for s in ss.spawn(2)]
        base = specs[r % len(specs)]
        spec = base.scaled(rng_cfg.uniform(*speed_range), rng_cfg.uniform(*yaw_range))
        th = theta
        if theta_spread > 0:
            th = MpcTheta.from_flat(np.clip(theta.flat * np.exp(rng_cfg.normal(0, theta_spread, 24)),
                                            *_bounds()))
        log = run_closed_loop(th, spec, setup, PlantActuation(model, rng_noise))
        if log.fell:
            n_fallen += 1
            continue
        keep = [j for j in range(log.n_steps)
                if not skip_settle or j * log.dt >= setup.gait.settle_s - 1e-9]
        parts.append((r, spec.kind, keep, log))
    if not parts:
        raise RuntimeError("every rollout fell; no data collected")
    ds = GrfmDataset(
        windows=np.concatenate([lg.windows[k] for _, _, k, lg in parts]),
        effects=np.concatenate([lg.ubar[k] for _, _, k, lg in parts]),
        contacts=np.concatenate([lg.contacts[k] for _, _, k, lg in parts]),
        rollout=np.concatenate([np.full(len(k), r) for r, _, k, _ in parts]),
        trajectory=[kind for _, kind, k, _ in parts for _ in k],
        step=np.concatenate([np.array(k) for _, _, k, _ in parts]),
        t=np.concatenate([np.array(k) * lg.dt for _, _, k, lg in parts]),
        meta={"seed": seed, "n_rollouts": n_rollouts, "n_fallen": n_fallen,
              "distortion": model.to_dict(), "theta": list(theta.flat),
              "speed_range": list(speed_range), "yaw_range": list(yaw_range),
              "theta_spread": theta_spread, "skip_settle": skip_settle})
    return ds, n_fallen


def _bounds():
    from .mpc import theta_bounds
    return theta_bounds()


def fidelity_metrics(log, force: MlpParams, moment: MlpParams):
    """Stance-phase MSE of command vs plant and of GRFM-Net vs plant.

    Each stance foot at each step is one sample; its squared error is summed
    over that foot's three channels of the group.
    """
    if not log.contacts.any():
        raise ValueError("rollout has no stance samples")
    out = {}
    for group, net, ch in (("force", force, FORCE_CH), ("moment", moment, MOMENT_CH)):
        pred = forward(net, log.windows[:, :, ch].reshape(log.n_steps, -1))
        cmd = log.windows[:, -1, ch]
        eff = log.ubar[:, ch]
        err_cmd, err_net = [], []
        for i in range(2):
            cols = np.arange(3 * i, 3 * i + 3)
            mask = log.contacts[:, i]
            err_cmd.append(np.sum((cmd[mask][:, cols] - eff[mask][:, cols]) ** 2, axis=1))
            err_net.append(np.sum((pred[mask][:, cols] - eff[mask][:, cols]) ** 2, axis=1))
        mse_cmd = float(np.mean(np.concatenate(err_cmd)))
        mse_net = float(np.mean(np.concatenate(err_net)))
        out[group] = {"mse_cmd_vs_plant": mse_cmd, "mse_net_vs_plant": mse_net,
                      "pass": bool(mse_net < mse_cmd)}
    return out


# ---- CSV persistence ----------------------------------------------------------

def dataset_header():
    cols = ["rollout", "trajectory", "step", "t_s", "contact0", "contact1"]
    for lag in range(WINDOW - 1, -1, -1):
        tag = "k" if lag == 0 else f"k-{lag}"
        cols += [f"cmd[{tag}]_{c}" for c in CHANNELS]
    cols += [f"eff_{c}" for c in CHANNELS]
    return cols


def write_dataset(ds: GrfmDataset, path, meta_path=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset_header())
        for n in range(len(ds)):
            row = [int(ds.rollout[n]), ds.trajectory[n], int(ds.step[n]), repr(float(ds.t[n])),
                   int(ds.contacts[n, 0]), int(ds.contacts[n, 1])]
            row += [repr(float(v)) for v in ds.windows[n].ravel()]
            row += [repr(float(v)) for v in ds.effects[n]]
            w.writerow(row)
    if meta_path is not None:
        with open(meta_path, "w") as fh:
            json.dump(ds.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_dataset(path, meta_path=None) -> GrfmDataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != dataset_header():
            raise ValueError(f"{path}: unexpected dataset header")
        rows = list(r)
    if not rows:
        raise ValueError(f"{path}: dataset is empty")
    n_win = WINDOW * NU
    num = np.array([[float(v) for v in row[6:]] for row in rows])
    meta = {}
    if meta_path is not None:
        with open(meta_path) as fh:
            meta = json.load(fh)
    return GrfmDataset(
        windows=num[:, :n_win].reshape(-1, WINDOW, NU), effects=num[:, n_win:],
        contacts=np.array([[row[4] == "1", row[5] == "1"] for row in rows]),
        rollout=np.array([int(row[0]) for row in rows]), trajectory=[row[1] for row in rows],
        step=np.array([int(row[2]) for row in rows]), t=np.array([float(row[3]) for row in rows]),
        meta=meta)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
