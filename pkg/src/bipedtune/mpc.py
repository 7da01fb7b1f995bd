"""Convex ground-reaction-force-and-moment MPC and its policy Jacobians.

The N-step problem is condensed: states are eliminated with
``x_{k+1} = A x_k + B u_k`` so the decision variable is the stacked control
sequence.  The tracking cost is placed on the states each control produces,
``x_1 .. x_N``.

Per step and foot the constraint block has 12 rows::

    0,1   +-F_x - mu F_z <= 0          friction pyramid
    2,3   +-F_y - mu F_z <= 0
    4     -F_z <= 0                    force limit
    5      F_z <= F_max  (0 in swing)
    6,7   +-(R_z' M)_x <= 0            body-frame M_x = 0
    8      (R_z' M)_y - l_t F_z <= 0   line foot
    9     -(R_z' M)_y - l_h F_z <= 0
    10,11 +-M_z - mu_t F_z <= 0        torsional cap
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import srbm
from .qp import QP, QPSolution, solve_qp
from .srbm import NU, NX, FootConfig, RobotParams

N_Q = 12        # tunable state weights (gravity weights frozen at zero)
N_R = 12
N_THETA = N_Q + N_R
ROWS_PER_FOOT = 12
Q_BOUNDS = (1e-4, 1e6)
R_BOUNDS = (1e-8, 1e2)


class InfeasibleStanceError(ValueError):
    pass


@dataclass(frozen=True)
class MpcTheta:
    """Diagonal MPC weights ``theta = [q_diag; r_diag]``."""

    q_diag: tuple
    r_diag: tuple

    def __post_init__(self):
        q = tuple(float(v) for v in np.ravel(self.q_diag))
        r = tuple(float(v) for v in np.ravel(self.r_diag))
        if len(q) != N_Q or len(r) != N_R:
            raise ValueError(f"expected {N_Q} state and {N_R} control weights")
        object.__setattr__(self, "q_diag", q)
        object.__setattr__(self, "r_diag", r)

    @classmethod
    def nominal(cls) -> "MpcTheta":
        return cls([100.0] * 6 + [1.0] * 6, [1e-3] * 12)

    @classmethod
    def from_flat(cls, theta) -> "MpcTheta":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (N_THETA,):
            raise ValueError(f"theta must have {N_THETA} entries")
        return cls(theta[:N_Q], theta[N_Q:])

    @property
    def flat(self) -> np.ndarray:
        return np.array(self.q_diag + self.r_diag)

    def in_bounds(self) -> bool:
        lo, hi = theta_bounds()
        t = self.flat
        return bool(np.all(t >= lo) and np.all(t <= hi))


def theta_bounds():
    lo = np.r_[np.full(N_Q, Q_BOUNDS[0]), np.full(N_R, R_BOUNDS[0])]
    hi = np.r_[np.full(N_Q, Q_BOUNDS[1]), np.full(N_R, R_BOUNDS[1])]
    return lo, hi


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 10
    dt_s: float = 0.04
    qp_tol: float = 1e-10
    dual_eps: float = 1e-9
    slack_eps: float = 1e-9

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if not self.dt_s > 0:
            raise ValueError("dt_s must be positive")


@dataclass
class MpcQP(QP):
    """Condensed MPC problem plus the data needed to differentiate it."""

    a_hat: np.ndarray = None
    b_hat: np.ndarray = None
    Sx: np.ndarray = None
    Su: np.ndarray = None
    qbar: np.ndarray = None
    err0: np.ndarray = None     # Sx x0 - x_ref, stacked
    x0: np.ndarray = None
    feet: FootConfig = None
    contacts: np.ndarray = None
    theta: MpcTheta = None
    cfg: MpcConfig = None
    params: RobotParams = None


@dataclass
class PolicyJacobians:
    du_dx: np.ndarray           # (12, 15)
    du_dtheta: np.ndarray       # (12, 24)
    du_dfeet: np.ndarray        # (12, 6)
    low_confidence: bool = False
    reasons: list = field(default_factory=list)


def _block_toeplitz(blocks, N):
    nx, nu = blocks[0].shape
    S = np.zeros((N * nx, N * nu))
    for k in range(N):
        for i in range(k + 1):
            S[k * nx:(k + 1) * nx, i * nu:(i + 1) * nu] = blocks[k - i]
    return S


def _prediction_matrices(a_hat, b_hat, N):
    powers = [a_hat]
    for _ in range(N - 1):
        powers.append(a_hat @ powers[-1])
    P = [b_hat]
    for _ in range(N - 1):
        P.append(a_hat @ P[-1])
    return np.vstack(powers), _block_toeplitz(P, N), powers, P


def _prediction_tangents(a_hat, da, db, powers, P, N):
    dpow = [da]
    for k in range(1, N):
        dpow.append(da @ powers[k - 1] + a_hat @ dpow[-1])
    dP = [db]
    for k in range(1, N):
        dP.append(da @ P[k - 1] + a_hat @ dP[-1])
    return np.vstack(dpow), _block_toeplitz(dP, N)


def _constraint_block(yaw, stance, params: RobotParams):
    """12x12 rows for one foot acting on its (F, M) = 6 variables, plus rhs."""
    R = srbm.rot_z(yaw)
    mx = R[:, 0]     # (R' M)_x = R[:,0] . M
    my = R[:, 1]
    mu, lt, lh, mt = params.friction_mu, params.toe_length_m, params.heel_length_m, params.torsional_mu_m
    G = np.zeros((ROWS_PER_FOOT, 6))
    G[0, [0, 2]] = (1.0, -mu)
    G[1, [0, 2]] = (-1.0, -mu)
    G[2, [1, 2]] = (1.0, -mu)
    G[3, [1, 2]] = (-1.0, -mu)
    G[4, 2] = -1.0
    G[5, 2] = 1.0
    G[6, 3:] = mx
    G[7, 3:] = -mx
    G[8, 3:] = my
    G[8, 2] = -lt
    G[9, 3:] = -my
    G[9, 2] = -lh
    G[10, 5] = 1.0
    G[10, 2] = -mt
    G[11, 5] = -1.0
    G[11, 2] = -mt
    h = np.zeros(ROWS_PER_FOOT)
    h[5] = params.f_max_n if stance else 0.0
    return G, h


def _constraint_block_dyaw(yaw):
    dR = srbm.drot_z(yaw)
    dG = np.zeros((ROWS_PER_FOOT, 6))
    dG[6, 3:] = dR[:, 0]
    dG[7, 3:] = -dR[:, 0]
    dG[8, 3:] = dR[:, 1]
    dG[9, 3:] = -dR[:, 1]
    return dG


def _foot_columns(k, i):
    """Indices of foot ``i``'s (F, M) variables at step ``k`` in the stacked u."""
    base = k * NU
    f = base + 3 * i
    m = base + 6 + 3 * i
    return np.r_[f:f + 3, m:m + 3]


def _assemble_constraints(yaw, contacts, params, N, derivative=False):
    G = np.zeros((N * 2 * ROWS_PER_FOOT, N * NU))
    h = np.zeros(N * 2 * ROWS_PER_FOOT)
    for k in range(N):
        for i in range(2):
            row0 = (2 * k + i) * ROWS_PER_FOOT
            cols = _foot_columns(k, i)
            if derivative:
                g = _constraint_block_dyaw(yaw)
            else:
                g, hh = _constraint_block(yaw, contacts[k][i], params)
                h[row0:row0 + ROWS_PER_FOOT] = hh
            G[row0:row0 + ROWS_PER_FOOT, cols] = g
    return G, h


def build_qp(x0, x_ref, contacts, feet: FootConfig, theta: MpcTheta, cfg: MpcConfig,
             params: RobotParams) -> MpcQP:
    """Condensed QP over the stacked controls ``u in R^{12 N}``.

    ``x_ref`` holds the references for ``x_1 .. x_N`` and ``contacts`` the
    stance flags for each of the ``N`` control steps.
    """
    N = cfg.horizon
    x0 = np.asarray(x0, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    contacts = np.asarray(contacts, dtype=bool).reshape(-1, 2)
    if x_ref.shape != (N, NX):
        raise ValueError(f"x_ref must have shape ({N}, {NX})")
    if contacts.shape != (N, 2):
        raise ValueError(f"contacts must have shape ({N}, 2)")
    if not np.all(contacts.any(axis=1)):
        raise InfeasibleStanceError("every MPC step needs at least one stance foot")

    a_cont, b_cont = srbm.linearize(x0, feet, params)
    a_hat, b_hat = srbm.discretize(a_cont, b_cont, cfg.dt_s)
    Sx, Su, _, _ = _prediction_matrices(a_hat, b_hat, N)

    q_full = np.r_[theta.q_diag, np.zeros(3)]
    qbar = np.tile(q_full, N)
    rbar = np.tile(np.asarray(theta.r_diag), N)
    err0 = Sx @ x0 - x_ref.ravel()
    QSu = qbar[:, None] * Su
    H = 2.0 * (Su.T @ QSu + np.diag(rbar))
    H = 0.5 * (H + H.T)
    f = 2.0 * QSu.T @ err0

    G, h = _assemble_constraints(x0[srbm.YAW], contacts, params, N)
    eq_pairs = []
    fixed = np.zeros(N * NU, dtype=bool)
    for k in range(N):
        for i in range(2):
            row0 = (2 * k + i) * ROWS_PER_FOOT
            eq_pairs.append((row0 + 6, row0 + 7))
            if not contacts[k][i]:
                fixed[_foot_columns(k, i)] = True
    return MpcQP(H=H, f=f, G=G, h=h, eq_pairs=tuple(eq_pairs), fixed=fixed,
                 a_hat=a_hat, b_hat=b_hat, Sx=Sx, Su=Su, qbar=qbar, err0=err0, x0=x0,
                 feet=feet, contacts=contacts, theta=theta, cfg=cfg, params=params)


def solve_mpc(problem: MpcQP) -> QPSolution:
    return solve_qp(problem, tol=problem.cfg.qp_tol)


def differentiate_policy(problem: MpcQP, sol: QPSolution) -> PolicyJacobians:
    """Jacobians of the first control block with respect to x0, theta and the feet.

    The working set is held fixed and the linearised KKT system is solved for
    every parameter direction.  Dependence of the linear model on yaw and on
    the foot levers (hence on ``p_c``) is included.
    """
    cfg, params = problem.cfg, problem.params
    N = cfg.horizon
    red = sol.reduction
    free = red.free
    W = sol.working
    rows_w = red.rows[W]
    nf, nw = free.size, W.size

    Su, Sx, qbar, err0, x0 = problem.Su, problem.Sx, problem.qbar, problem.err0, problem.x0
    u = sol.u
    lam_w = np.array([sol.duals[r] - (sol.duals[red.partner[w]] if red.is_eq[w] else 0.0)
                      for w, r in zip(W, rows_w)])
    QSu = qbar[:, None] * Su

    n_dir = NX + N_THETA + 6
    dHu = np.zeros((N * NU, n_dir))     # dH @ u + df, per direction
    dGu = np.zeros((nw, n_dir))         # dG_W @ u
    dGtl = np.zeros((N * NU, n_dir))    # dG_W' @ lam_W

    # x0 through the stacked error (all state directions)
    dHu[:, :NX] = 2.0 * QSu.T @ Sx

    # nonlinear dependence of the model on yaw, p_c and the feet
    da, db, db_lever = srbm.linearize_tangents(x0, problem.feet, params)
    _, _, powers, P = _prediction_matrices(problem.a_hat, problem.b_hat, N)
    dt = cfg.dt_s
    directions = {srbm.YAW: (da * dt, db * dt)}
    zero_a = np.zeros((NX, NX))
    for c in range(3):
        directions[3 + c] = (zero_a, -dt * (db_lever[0, c] + db_lever[1, c]))
    for i in range(2):
        for c in range(3):
            directions[NX + N_THETA + 3 * i + c] = (zero_a, dt * db_lever[i, c])
    for col, (dA, dB) in directions.items():
        dSx, dSu = _prediction_tangents(problem.a_hat, dA, dB, powers, P, N)
        dSu_u = dSu @ u
        Su_u = Su @ u
        dHu[:, col] += 2.0 * (dSu.T @ (qbar * Su_u) + QSu.T @ dSu_u)
        dHu[:, col] += 2.0 * dSu.T @ (qbar * err0) + 2.0 * QSu.T @ (dSx @ x0)

    dG_yaw, _ = _assemble_constraints(x0[srbm.YAW], problem.contacts, params, N, derivative=True)
    dGw = dG_yaw[rows_w]
    dGu[:, srbm.YAW] = dGw @ u
    dGtl[:, srbm.YAW] = dGw.T @ lam_w

    # theta: state weights then control weights
    Su_u = Su @ u
    err = err0 + Su_u    # predicted tracking error at the solution
    for i in range(N_Q):
        idx = np.arange(N) * NX + i
        dHu[:, NX + i] = 2.0 * Su[idx].T @ err[idx]
    for i in range(N_R):
        idx = np.arange(N) * NU + i
        dHu[idx, NX + N_Q + i] = 2.0 * u[idx]

    K = np.zeros((nf + nw, nf + nw))
    K[:nf, :nf] = problem.H[np.ix_(free, free)]
    Gw = problem.G[np.ix_(rows_w, free)]
    K[:nf, nf:] = Gw.T
    K[nf:, :nf] = Gw
    rhs = -np.vstack([(dHu + dGtl)[free], dGu])

    reasons = []
    sol_dir = _solve_kkt_directions(K, rhs)
    if sol_dir is None:
        sol_dir = np.linalg.lstsq(K, rhs, rcond=None)[0]
        reasons.append("degenerate KKT matrix")

    reasons += _complementarity_issues(problem, sol, cfg)

    du_full = np.zeros((N * NU, n_dir))
    du_full[free] = sol_dir[:nf]
    du0 = du_full[:NU]
    return PolicyJacobians(du_dx=du0[:, :NX], du_dtheta=du0[:, NX:NX + N_THETA],
                           du_dfeet=du0[:, NX + N_THETA:], low_confidence=bool(reasons),
                           reasons=reasons)


def _solve_kkt_directions(K, rhs, rcond_min=1e-13):
    """Equilibrated LU solve; ``None`` when the KKT matrix is numerically singular."""
    s = 1.0 / np.sqrt(np.maximum(np.abs(K).max(axis=1), 1e-300))
    Ks = s[:, None] * K * s[None, :]
    lu, piv, info = sla.lapack.dgetrf(Ks)
    if info != 0:
        return None
    rcond, _ = sla.lapack.dgecon(lu, np.abs(Ks).sum(axis=0).max(), norm="1")
    if rcond < rcond_min:
        return None
    return s[:, None] * sla.lu_solve((lu, piv), s[:, None] * rhs)


def _complementarity_issues(problem: MpcQP, sol: QPSolution, cfg: MpcConfig):
    red = sol.reduction
    in_w = np.zeros(red.rows.size, dtype=bool)
    in_w[sol.working] = True
    ineq = ~red.is_eq
    lam = sol.duals[red.rows]
    lam_scale = 1.0 + np.abs(lam).max(initial=0.0)
    slack = problem.h[red.rows] - problem.G[red.rows] @ sol.u
    out = []
    if np.any(lam[in_w & ineq] <= cfg.dual_eps * lam_scale):
        out.append("weakly active constraint")
    if np.any(slack[~in_w & ineq] <= cfg.slack_eps * (1.0 + np.abs(problem.h[red.rows][~in_w & ineq]))):
        out.append("inactive constraint at zero slack")
    return out


def active_signature(problem: MpcQP, sol: QPSolution) -> frozenset:
    """Hashable description of the active set, for stability checks."""
    return frozenset(int(r) for r in sol.active)


@dataclass
class MpcController:
    """Receding-horizon controller ``u = h(x, x_ref, theta)``."""

    theta: MpcTheta = field(default_factory=MpcTheta.nominal)
    cfg: MpcConfig = field(default_factory=MpcConfig)
    params: RobotParams = field(default_factory=RobotParams)

    def solve(self, x0, x_ref, contacts, feet: FootConfig):
        problem = build_qp(x0, x_ref, contacts, feet, self.theta, self.cfg, self.params)
        sol = solve_mpc(problem)
        return sol.u[:NU].copy(), problem, sol

    def jacobians(self, problem: MpcQP, sol: QPSolution) -> PolicyJacobians:
        return differentiate_policy(problem, sol)
