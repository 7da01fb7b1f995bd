"""Single-rigid-body model (SRBM) of a biped driven by ground reaction forces and moments.

State layout (15)::

    x = [e (roll, pitch, yaw); p_c; omega (world); p_c_dot; g]

Control layout (12)::

    u = [F0; F1; M0; M1]     (world-frame, per foot)

The gravity state ``g`` is the physical gravitational acceleration vector
(``(0, 0, -9.81)``) carried as a constant state so the linear model has no
affine term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NX = 15
NU = 12

# state slices
EUL = slice(0, 3)
POS = slice(3, 6)
OMEGA = slice(6, 9)
VEL = slice(9, 12)
GRAV = slice(12, 15)
YAW = 2

# control slices
F0 = slice(0, 3)
F1 = slice(3, 6)
M0 = slice(6, 9)
M1 = slice(9, 12)
FORCE_SLICES = (F0, F1)
MOMENT_SLICES = (M0, M1)


@dataclass(frozen=True)
class RobotParams:
    """Physical constants of the robot.

    Only ``mass_kg`` is a published figure for the hardware; inertia, foot
    geometry, friction and force limits are placeholder defaults.
    """

    mass_kg: float = 12.0
    body_inertia_kgm2: tuple = ((0.168, 0.0, 0.0), (0.0, 0.117, 0.0), (0.0, 0.0, 0.064))
    toe_length_m: float = 0.09
    heel_length_m: float = 0.06
    friction_mu: float = 0.5
    torsional_mu_m: float = 0.05
    f_max_n: float = 500.0
    gravity_mps2: tuple = (0.0, 0.0, -9.81)

    def __post_init__(self):
        inertia = np.asarray(self.body_inertia_kgm2, dtype=float)
        if inertia.shape != (3, 3):
            raise ValueError("body_inertia_kgm2 must be 3x3")
        if not np.allclose(inertia, inertia.T):
            raise ValueError("body_inertia_kgm2 must be symmetric")
        if np.any(np.linalg.eigvalsh(inertia) <= 0):
            raise ValueError("body_inertia_kgm2 must be positive definite")
        for name in ("mass_kg", "toe_length_m", "heel_length_m", "friction_mu",
                     "torsional_mu_m", "f_max_n"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if np.asarray(self.gravity_mps2).shape != (3,):
            raise ValueError("gravity_mps2 must be a 3-vector")
        # normalise to hashable nested tuples
        object.__setattr__(self, "body_inertia_kgm2", tuple(map(tuple, inertia.tolist())))
        object.__setattr__(self, "gravity_mps2", tuple(float(v) for v in self.gravity_mps2))

    @property
    def inertia(self) -> np.ndarray:
        return np.array(self.body_inertia_kgm2, dtype=float)

    @property
    def gravity(self) -> np.ndarray:
        return np.array(self.gravity_mps2, dtype=float)

    @property
    def weight(self) -> float:
        return self.mass_kg * float(np.linalg.norm(self.gravity))


@dataclass
class FootConfig:
    """World-frame foot centres and stance flags for both feet."""

    foot_pos: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))
    in_stance: tuple = (True, True)

    def __post_init__(self):
        self.foot_pos = np.array(self.foot_pos, dtype=float).reshape(2, 3)
        self.in_stance = tuple(bool(s) for s in self.in_stance)

    def levers(self, com_pos) -> np.ndarray:
        """Vectors from the CoM to each foot centre, shape (2, 3)."""
        return self.foot_pos - np.asarray(com_pos, dtype=float)[None, :]

    def copy(self) -> "FootConfig":
        return FootConfig(self.foot_pos.copy(), self.in_stance)


def make_state(euler=(0, 0, 0), com_pos=(0, 0, 0), ang_vel=(0, 0, 0), com_vel=(0, 0, 0),
               params: RobotParams | None = None) -> np.ndarray:
    params = params or RobotParams()
    return np.concatenate([euler, com_pos, ang_vel, com_vel, params.gravity]).astype(float)


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def drot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_rate_map(yaw: float) -> np.ndarray:
    """Yaw-only map from world angular velocity to Euler-angle rates."""
    return rot_z(yaw).T


def world_inertia_inv(yaw: float, params: RobotParams) -> np.ndarray:
    R = rot_z(yaw)
    return R @ np.linalg.inv(params.inertia) @ R.T


def _d_world_inertia_inv(yaw: float, params: RobotParams) -> np.ndarray:
    R, dR = rot_z(yaw), drot_z(yaw)
    inv_b = np.linalg.inv(params.inertia)
    return dR @ inv_b @ R.T + R @ inv_b @ dR.T


def _check_inputs(x, u=None):
    x = np.asarray(x, dtype=float)
    if x.shape != (NX,):
        raise ValueError(f"state must have shape ({NX},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("state contains non-finite values")
    if abs(x[1]) >= np.pi / 2:
        raise ValueError("|pitch| >= pi/2: Euler-rate map is singular")
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape != (NU,):
            raise ValueError(f"control must have shape ({NU},), got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("control contains non-finite values")
    return x, u


def continuous_dynamics(x, u, feet: FootConfig, params: RobotParams) -> np.ndarray:
    """Time derivative of the SRBM state.

    Forces of swing feet are not masked here; the caller decides what acts.
    """
    x, u = _check_inputs(x, u)
    yaw = x[YAW]
    r = feet.levers(x[POS])
    torque = sum(np.cross(r[i], u[FORCE_SLICES[i]]) + u[MOMENT_SLICES[i]] for i in range(2))
    xdot = np.zeros(NX)
    xdot[EUL] = euler_rate_map(yaw) @ x[OMEGA]
    xdot[POS] = x[VEL]
    xdot[OMEGA] = world_inertia_inv(yaw, params) @ torque
    xdot[VEL] = (u[F0] + u[F1]) / params.mass_kg + x[GRAV]
    return xdot


def dynamics_jacobians(x, u, feet: FootConfig, params: RobotParams):
    """Exact Jacobians of :func:`continuous_dynamics`.

    Returns ``(df_dx, df_du, df_dfeet)`` with shapes (15, 15), (15, 12), (15, 6);
    ``df_dfeet`` is with respect to the flattened ``feet.foot_pos``.
    """
    x, u = _check_inputs(x, u)
    yaw = x[YAW]
    r = feet.levers(x[POS])
    inv_g = world_inertia_inv(yaw, params)
    torque = sum(np.cross(r[i], u[FORCE_SLICES[i]]) + u[MOMENT_SLICES[i]] for i in range(2))

    dfdx = np.zeros((NX, NX))
    dfdx[EUL, OMEGA] = euler_rate_map(yaw)
    dfdx[EUL, YAW] = drot_z(yaw).T @ x[OMEGA]
    dfdx[POS, VEL] = np.eye(3)
    dfdx[OMEGA, YAW] = _d_world_inertia_inv(yaw, params) @ torque
    # r_i = foot_i - p_c, and d(r x F)/dr = -skew(F)
    dfdx[OMEGA, POS] = inv_g @ sum(skew(u[FORCE_SLICES[i]]) for i in range(2))
    dfdx[VEL, GRAV] = np.eye(3)

    dfdu = _input_matrix(yaw, r, params)

    dfdfeet = np.zeros((NX, 6))
    for i in range(2):
        dfdfeet[OMEGA, 3 * i:3 * i + 3] = -inv_g @ skew(u[FORCE_SLICES[i]])
    return dfdx, dfdu, dfdfeet


def _input_matrix(yaw, levers, params: RobotParams) -> np.ndarray:
    inv_g = world_inertia_inv(yaw, params)
    b = np.zeros((NX, NU))
    for i in range(2):
        b[OMEGA, FORCE_SLICES[i]] = inv_g @ skew(levers[i])
        b[OMEGA, MOMENT_SLICES[i]] = inv_g
        b[VEL, FORCE_SLICES[i]] = np.eye(3) / params.mass_kg
    return b


def linearize(x, feet: FootConfig, params: RobotParams):
    """Frozen-coefficient linear model ``xdot = a_cont @ x + b_cont @ u``.

    Yaw (in the Euler-rate map and world inertia) and the foot levers are
    frozen at their values in ``x``, so ``a_cont @ x + b_cont @ u`` equals
    :func:`continuous_dynamics` exactly at the linearisation point.
    """
    x, _ = _check_inputs(x)
    inv_i = np.linalg.inv(params.inertia)
    if not np.all(np.isfinite(inv_i)):
        raise np.linalg.LinAlgError("singular inertia")
    yaw = x[YAW]
    a = np.zeros((NX, NX))
    a[EUL, OMEGA] = euler_rate_map(yaw)
    a[POS, VEL] = np.eye(3)
    a[VEL, GRAV] = np.eye(3)
    b = _input_matrix(yaw, feet.levers(x[POS]), params)
    return a, b


def linearize_tangents(x, feet: FootConfig, params: RobotParams):
    """Derivatives of ``(a_cont, b_cont)`` from :func:`linearize`.

    Returns ``(da_dyaw, db_dyaw, db_dlever)`` where ``db_dlever[i, c]`` is the
    derivative of ``b_cont`` with respect to component ``c`` of foot ``i``'s
    lever.  Position derivatives follow from ``d lever / d p_c = -I``.
    """
    yaw = x[YAW]
    r = feet.levers(x[POS])
    d_inv = _d_world_inertia_inv(yaw, params)
    inv_g = world_inertia_inv(yaw, params)
    da = np.zeros((NX, NX))
    da[EUL, OMEGA] = drot_z(yaw).T
    db = np.zeros((NX, NU))
    for i in range(2):
        db[OMEGA, FORCE_SLICES[i]] = d_inv @ skew(r[i])
        db[OMEGA, MOMENT_SLICES[i]] = d_inv
    db_lever = np.zeros((2, 3, NX, NU))
    for i in range(2):
        for c in range(3):
            e = np.zeros(3)
            e[c] = 1.0
            db_lever[i, c][OMEGA, FORCE_SLICES[i]] = inv_g @ skew(e)
    return da, db, db_lever


def discretize(a_cont, b_cont, dt: float):
    """Forward-Euler discretisation: ``(I + a dt, b dt)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    a_cont = np.asarray(a_cont, dtype=float)
    b_cont = np.asarray(b_cont, dtype=float)
    if not (np.all(np.isfinite(a_cont)) and np.all(np.isfinite(b_cont))):
        raise ValueError("non-finite system matrices")
    return np.eye(a_cont.shape[0]) + a_cont * dt, b_cont * dt


def euler_step(x, u, feet: FootConfig, params: RobotParams, dt: float) -> np.ndarray:
    return np.asarray(x, dtype=float) + dt * continuous_dynamics(x, u, feet, params)


def standing_feet(com_pos, hip_offset_m: float = 0.047, yaw: float = 0.0) -> FootConfig:
    """Both feet on the ground, laterally offset from the CoM projection."""
    com_pos = np.asarray(com_pos, dtype=float)
    lateral = rot_z(yaw) @ np.array([0.0, hip_offset_m, 0.0])
    feet = np.array([com_pos + lateral, com_pos - lateral])
    feet[:, 2] = 0.0
    return FootConfig(feet, (True, True))
