"""Gait schedule, Raibert foot placement and reference trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .srbm import NX, RobotParams, rot_z, drot_z

# integer-rounding guard for phase arithmetic on float clocks
_PHASE_EPS = 1e-9


@dataclass(frozen=True)
class GaitSchedule:
    """Alternating single support after a double-stance settle window."""

    step_duration_s: float = 0.3
    settle_s: float = 0.3
    phase_offset: tuple = (0.0, 0.5)
    t0_s: float = 0.0

    def __post_init__(self):
        if not self.step_duration_s > 0:
            raise ValueError("step_duration_s must be positive")
        if self.settle_s < 0:
            raise ValueError("settle_s must be non-negative")
        if any(not 0.0 <= p < 1.0 for p in self.phase_offset):
            raise ValueError("phase offsets must lie in [0, 1)")

    @property
    def period_s(self) -> float:
        return 2.0 * self.step_duration_s


def contact_at(t: float, gait: GaitSchedule) -> tuple:
    """Stance flags ``(foot0, foot1)`` at time ``t``."""
    tau = t - gait.t0_s
    if tau < -_PHASE_EPS:
        raise ValueError("t precedes the gait start time")
    if tau < gait.settle_s - _PHASE_EPS:
        return (True, True)
    phase = (tau - gait.settle_s) / gait.period_s
    flags = []
    for offset in gait.phase_offset:
        p = (phase + offset + _PHASE_EPS) % 1.0
        flags.append(bool(p < 0.5))
    return tuple(flags)


def raibert_placement(com_pos, com_vel, step_duration_s: float, hip_offset_m: float = 0.0,
                      yaw: float = 0.0) -> np.ndarray:
    """Touchdown point ``p_c + v * dt / 2`` projected to the ground.

    ``hip_offset_m`` is a signed lateral offset in the yaw-aligned frame.
    """
    if not step_duration_s > 0:
        raise ValueError("step_duration_s must be positive")
    p = np.asarray(com_pos, dtype=float) + np.asarray(com_vel, dtype=float) * step_duration_s / 2
    p = p + rot_z(yaw) @ np.array([0.0, hip_offset_m, 0.0])
    p[2] = 0.0
    return p


def raibert_jacobian(yaw: float, step_duration_s: float, hip_offset_m: float = 0.0) -> np.ndarray:
    """Derivative of :func:`raibert_placement` with respect to the full 15-dim state."""
    J = np.zeros((3, NX))
    J[:2, 3:5] = np.eye(2)
    J[:2, 9:11] = np.eye(2) * step_duration_s / 2
    J[:, 2] = drot_z(yaw) @ np.array([0.0, hip_offset_m, 0.0])
    J[2, :] = 0.0
    return J


PRESETS = ("straight", "c_shape", "s_shape")


@dataclass(frozen=True)
class TrajectorySpec:
    """Forward speed with a piecewise-constant yaw rate.

    ``yaw_rate_segments`` is a tuple of ``(t_end_s, rate_radps)``; the last
    rate is held beyond its end time.
    """

    kind: str = "straight"
    v_x_des_mps: float = 0.5
    yaw_rate_segments: tuple = ((4.0, 0.0),)
    duration_s: float = 4.0
    com_height_m: float = 0.55

    def __post_init__(self):
        if not self.yaw_rate_segments:
            raise ValueError("at least one yaw-rate segment is required")
        ends = [float(s[0]) for s in self.yaw_rate_segments]
        if any(b <= a for a, b in zip(ends, ends[1:])) or ends[0] <= 0:
            raise ValueError("yaw-rate segment end times must be positive and increasing")
        object.__setattr__(self, "yaw_rate_segments",
                           tuple((float(a), float(b)) for a, b in self.yaw_rate_segments))

    def yaw_rate(self, t: float) -> float:
        for t_end, rate in self.yaw_rate_segments:
            if t <= t_end:
                return rate
        return self.yaw_rate_segments[-1][1]

    def scaled(self, speed_scale: float = 1.0, yaw_scale: float = 1.0) -> "TrajectorySpec":
        segs = tuple((t, r * yaw_scale) for t, r in self.yaw_rate_segments)
        return TrajectorySpec(self.kind, self.v_x_des_mps * speed_scale, segs,
                              self.duration_s, self.com_height_m)


def preset(name: str, duration_s: float = 4.0, com_height_m: float = 0.55) -> TrajectorySpec:
    """The three test trajectories: straight line, C-shape and S-shape."""
    if name == "straight":
        return TrajectorySpec("straight", 0.5, ((duration_s, 0.0),), duration_s, com_height_m)
    if name == "c_shape":
        return TrajectorySpec("c_shape", 0.25, ((duration_s, 0.25 * np.pi),), duration_s,
                              com_height_m)
    if name == "s_shape":
        return TrajectorySpec("s_shape", 0.5, ((2.0, 0.5 * np.pi), (4.0, -0.5 * np.pi)),
                              duration_s, com_height_m)
    raise KeyError(f"unknown trajectory preset {name!r}; expected one of {PRESETS}")


def _pose_at(spec: TrajectorySpec, t: float):
    """Reference yaw and planar position at time ``t`` via exact arc integration."""
    yaw = 0.0
    pos = np.zeros(2)
    v = spec.v_x_des_mps
    t_a = 0.0
    bounds = [s[0] for s in spec.yaw_rate_segments[:-1]] + [np.inf]
    rates = [s[1] for s in spec.yaw_rate_segments]
    for t_end, rate in zip(bounds, rates):
        t_b = min(t, t_end)
        if t_b > t_a:
            h = t_b - t_a
            yaw_b = yaw + rate * h
            if abs(rate) < 1e-12:
                pos = pos + v * h * np.array([np.cos(yaw), np.sin(yaw)])
            else:
                pos = pos + (v / rate) * np.array([np.sin(yaw_b) - np.sin(yaw),
                                                   np.cos(yaw) - np.cos(yaw_b)])
            yaw = yaw_b
            t_a = t_b
        if t <= t_end:
            break
    return yaw, pos


def reference_state(spec: TrajectorySpec, t: float, params: RobotParams | None = None) -> np.ndarray:
    params = params or RobotParams()
    yaw, pos = _pose_at(spec, t)
    rate = spec.yaw_rate(t)
    x = np.zeros(NX)
    x[2] = yaw
    x[3:5] = pos
    x[5] = spec.com_height_m
    x[6:9] = (0.0, 0.0, rate)
    x[9:12] = rot_z(yaw) @ np.array([spec.v_x_des_mps, 0.0, 0.0])
    x[12:15] = params.gravity
    return x


def generate_reference(spec: TrajectorySpec, t: float, n_steps: int, dt: float,
                       params: RobotParams | None = None) -> np.ndarray:
    """Reference states at ``t + k dt`` for ``k = 0 .. n_steps - 1``; shape (n_steps, 15)."""
    return np.array([reference_state(spec, t + k * dt, params) for k in range(n_steps)])
