"""Closed-loop rollout of the MPC on the SRBM with a pluggable actuation model.

The same loop serves three roles: the nominal differentiable simulator, the
GRFM-Net-augmented simulator, and the surrogate "physical" plant.  Only the
actuation model changes:

``x_{j+1} = x_j + dt * f(x_j, act(u_{j-2}, u_{j-1}, u_j))``

Command windows before the first step are padded with ``u_0``.  Wrench
channels of swing feet are zeroed after actuation because the ground cannot
push a lifted foot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gait as gait_mod
from . import mpc as mpc_mod
from . import srbm
from .grfm_net import MlpParams, forward, input_jacobian
from .srbm import NU, NX, RobotParams

WINDOW = 3
FALL_ANGLE_RAD = 0.6
FORCE_CH = np.arange(0, 6)
MOMENT_CH = np.arange(6, 12)


def foot_channels(i):
    return np.r_[3 * i:3 * i + 3, 6 + 3 * i:6 + 3 * i + 3]


@dataclass(frozen=True)
class SimSetup:
    """Everything about the closed loop except the weights and the trajectory."""

    params: RobotParams = field(default_factory=RobotParams)
    gait: gait_mod.GaitSchedule = field(default_factory=gait_mod.GaitSchedule)
    mpc: mpc_mod.MpcConfig = field(default_factory=mpc_mod.MpcConfig)
    hip_offset_m: float = 0.047
    plant_substeps: int = 1
    fall_angle_rad: float = FALL_ANGLE_RAD


class NominalActuation:
    """Commanded wrench acts unchanged."""

    differentiable = True

    def effect(self, window):
        return window[-1].copy()

    def jacobian(self, window):
        return None


class LearnedActuation:
    """GRFM-Net pair standing in for the command-to-effect map."""

    differentiable = True

    def __init__(self, force: MlpParams, moment: MlpParams):
        if force.group != "force" or moment.group != "moment":
            raise ValueError("expected a (force, moment) network pair")
        self.force = force
        self.moment = moment

    def effect(self, window):
        out = np.empty(NU)
        out[FORCE_CH] = forward(self.force, window[:, FORCE_CH].ravel())
        out[MOMENT_CH] = forward(self.moment, window[:, MOMENT_CH].ravel())
        return out

    def jacobian(self, window):
        """Per-lag Jacobians, shape (3, 12, 12), oldest lag first."""
        J = np.zeros((WINDOW, NU, NU))
        jf = input_jacobian(self.force, window[:, FORCE_CH].ravel())
        jm = input_jacobian(self.moment, window[:, MOMENT_CH].ravel())
        for lag in range(WINDOW):
            J[lag][np.ix_(FORCE_CH, FORCE_CH)] = jf[:, 6 * lag:6 * lag + 6]
            J[lag][np.ix_(MOMENT_CH, MOMENT_CH)] = jm[:, 6 * lag:6 * lag + 6]
        return J


@dataclass
class RolloutLog:
    dt: float
    t: np.ndarray               # (T+1,)
    x: np.ndarray               # (T+1, 15)
    x_ref: np.ndarray           # (T+1, 15)
    u: np.ndarray               # (T, 12) commands
    ubar: np.ndarray            # (T, 12) effects
    windows: np.ndarray         # (T, 3, 12)
    contacts: np.ndarray        # (T, 2)
    feet: np.ndarray            # (T, 2, 3)
    kkt_residual: np.ndarray    # (T,)
    low_confidence: np.ndarray  # (T,) bool
    active_sets: list
    fell: bool = False
    dx_dtheta: np.ndarray | None = None     # (T+1, 15, 24)
    du_dtheta: np.ndarray | None = None     # (T, 12, 24)
    loss: dict = field(default_factory=dict)
    grad: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return self.u.shape[0]


def initial_state(spec: gait_mod.TrajectorySpec, params: RobotParams) -> np.ndarray:
    """Standing still at the reference start pose."""
    x = gait_mod.reference_state(spec, 0.0, params)
    x[srbm.OMEGA] = 0.0
    x[srbm.VEL] = 0.0
    return x


def is_fallen(x, setup: SimSetup) -> bool:
    if not np.all(np.isfinite(x)):
        return True
    if abs(x[0]) > setup.fall_angle_rad or abs(x[1]) > setup.fall_angle_rad:
        return True
    return bool(x[5] < 0.2 or x[5] > 2.0 or np.abs(x).max() > 1e3)


def run_closed_loop(theta: mpc_mod.MpcTheta, spec: gait_mod.TrajectorySpec, setup: SimSetup,
                    actuation=None, sensitivity: bool = False, n_steps: int | None = None,
                    x_init=None) -> RolloutLog:
    """Simulate ``n_steps`` MPC steps (default: the trajectory duration)."""
    actuation = actuation or NominalActuation()
    if sensitivity and not actuation.differentiable:
        raise ValueError("sensitivity propagation needs a differentiable actuation model")
    params, gait, cfg = setup.params, setup.gait, setup.mpc
    dt, N = cfg.dt_s, cfg.horizon
    T = int(round(spec.duration_s / dt)) if n_steps is None else int(n_steps)
    hip = (setup.hip_offset_m, -setup.hip_offset_m)
    n_th = mpc_mod.N_THETA

    x = initial_state(spec, params) if x_init is None else np.array(x_init, dtype=float)
    feet = srbm.standing_feet(x[srbm.POS], setup.hip_offset_m, x[srbm.YAW])
    prev_contact = (True, True)

    xs, refs, us, ubars, wins, cons, feet_log, kkts, lowc, actives = ([x.copy()], [], [], [], [],
                                                                       [], [], [], [], [])
    refs.append(gait_mod.reference_state(spec, 0.0, params))
    dx = np.zeros((NX, n_th))
    dfeet = np.zeros((6, n_th))
    dxs, dus = [dx.copy()], []
    fell = False
    sub = max(1, int(setup.plant_substeps))
    h_sub = dt / sub

    for j in range(T):
        t = j * dt
        contact = gait_mod.contact_at(t, gait)
        for i in range(2):
            if not contact[i] or not prev_contact[i]:
                feet.foot_pos[i] = gait_mod.raibert_placement(
                    x[srbm.POS], x[srbm.VEL], gait.step_duration_s, hip[i], x[srbm.YAW])
                if sensitivity:
                    Rj = gait_mod.raibert_jacobian(x[srbm.YAW], gait.step_duration_s, hip[i])
                    dfeet[3 * i:3 * i + 3] = Rj @ dx
        feet.in_stance = contact
        prev_contact = contact

        x_ref = gait_mod.generate_reference(spec, t + dt, N, dt, params)
        horizon_contacts = [gait_mod.contact_at(t + k * dt, gait) for k in range(N)]
        problem = mpc_mod.build_qp(x, x_ref, horizon_contacts, feet, theta, cfg, params)
        sol = mpc_mod.solve_mpc(problem)
        u = sol.u[:NU].copy()
        us.append(u)
        kkts.append(sol.kkt_residual)
        actives.append(mpc_mod.active_signature(problem, sol))

        window = np.array([us[max(j - 2, 0)], us[max(j - 1, 0)], u])
        ubar = actuation.effect(window)
        gate = np.ones(NU)
        for i in range(2):
            if not contact[i]:
                gate[foot_channels(i)] = 0.0
        ubar = ubar * gate

        low = False
        if sensitivity:
            pj = mpc_mod.differentiate_policy(problem, sol)
            low = pj.low_confidence
            du = pj.du_dx @ dx + pj.du_dfeet @ dfeet + pj.du_dtheta
            dus.append(du)
            J = actuation.jacobian(window)
            if J is None:
                dubar = du
            else:
                dubar = sum(J[lag] @ dus[max(j - (WINDOW - 1 - lag), 0)] for lag in range(WINDOW))
            dubar = gate[:, None] * dubar

        for _ in range(sub):
            if sensitivity:
                fx, fu, ff = srbm.dynamics_jacobians(x, ubar, feet, params)
                dx = dx + h_sub * (fx @ dx + fu @ dubar + ff @ dfeet)
            x = x + h_sub * srbm.continuous_dynamics(x, ubar, feet, params)

        ubars.append(ubar)
        wins.append(window)
        cons.append(contact)
        feet_log.append(feet.foot_pos.copy())
        lowc.append(low)
        xs.append(x.copy())
        refs.append(gait_mod.reference_state(spec, t + dt, params))
        if sensitivity:
            dxs.append(dx.copy())
        if is_fallen(x, setup):
            fell = True
            break

    log = RolloutLog(dt=dt, t=np.arange(len(xs)) * dt, x=np.array(xs), x_ref=np.array(refs),
                     u=np.array(us).reshape(-1, NU), ubar=np.array(ubars).reshape(-1, NU),
                     windows=np.array(wins).reshape(-1, WINDOW, NU),
                     contacts=np.array(cons, dtype=bool).reshape(-1, 2),
                     feet=np.array(feet_log).reshape(-1, 2, 3), kkt_residual=np.array(kkts),
                     low_confidence=np.array(lowc, dtype=bool), active_sets=actives, fell=fell)
    if sensitivity:
        log.dx_dtheta = np.array(dxs)
        log.du_dtheta = np.array(dus).reshape(-1, NU, n_th)
    return log
