"""Gradient-based autotuning of the MPC weights through a differentiable rollout.

The loss over a closed-loop rollout of ``T`` steps is::

    L = alpha1 * sum_j |e_j - e_ref_j|^2 + alpha2 * sum_j |p_j - p_ref_j|^2
        + sum_j |u_j - u_{j-1}|^2

with state sums over ``j = 1..T`` and the smoothness sum over the commands
``u_0..u_{T-1}`` (taking ``u_{-1} = u_0``).  Its gradient is assembled by the
chain rule from the sensitivities ``dx_j/dtheta`` and ``du_j/dtheta`` carried
forward by :func:`bipedtune.closed_loop.run_closed_loop`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import gait as gait_mod
from .closed_loop import LearnedActuation, NominalActuation, RolloutLog, SimSetup, run_closed_loop
from .mpc import N_Q, N_THETA, MpcTheta, theta_bounds
from .srbm import EUL, POS

logger = logging.getLogger(__name__)


class TuningFallError(RuntimeError):
    """The initial parameters already fall, so there is no gradient to follow."""


@dataclass(frozen=True)
class TuneConfig:
    alpha1: float = 1e5
    alpha2: float = 2e5
    beta_q: float = 0.05
    beta_r: float = 0.08
    iterations: int = 10
    theta_init: MpcTheta = field(default_factory=MpcTheta.nominal)
    theta_lower: tuple | None = None
    theta_upper: tuple | None = None
    use_grfm_net: bool = False
    trajectory: gait_mod.TrajectorySpec = field(default_factory=lambda: gait_mod.preset("straight"))
    horizon_steps: int | None = None
    step_mode: str = "relative"

    def __post_init__(self):
        for name in ("beta_q", "beta_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.step_mode not in ("relative", "raw"):
            raise ValueError("step_mode must be 'relative' or 'raw'")
        lo, hi = self.bounds()
        t = self.theta_init.flat
        if np.any(t < lo) or np.any(t > hi):
            raise ValueError("theta_init lies outside the feasible box")

    def bounds(self):
        lo, hi = theta_bounds()
        if self.theta_lower is not None:
            lo = np.asarray(self.theta_lower, dtype=float)
        if self.theta_upper is not None:
            hi = np.asarray(self.theta_upper, dtype=float)
        return lo, hi


def project(theta, lower=None, upper=None) -> np.ndarray:
    """Clamp ``theta`` elementwise to the feasible box."""
    lo, hi = theta_bounds()
    lo = lo if lower is None else np.asarray(lower, dtype=float)
    hi = hi if upper is None else np.asarray(upper, dtype=float)
    return np.clip(np.asarray(theta, dtype=float), lo, hi)


def loss_terms(log: RolloutLog):
    """``(L_Eul, L_pos, L_ctrl)`` of a (possibly truncated) rollout."""
    e = log.x[1:, EUL] - log.x_ref[1:, EUL]
    p = log.x[1:, POS] - log.x_ref[1:, POS]
    du = np.diff(log.u, axis=0)
    return float(np.sum(e * e)), float(np.sum(p * p)), float(np.sum(du * du))


def total_loss(terms, alpha1, alpha2) -> float:
    l_eul, l_pos, l_ctrl = terms
    return alpha1 * l_eul + alpha2 * l_pos + l_ctrl


def loss_and_gradient(log: RolloutLog, alpha1: float = 1e5, alpha2: float = 2e5):
    """Total loss and its gradient with respect to theta.

    Needs a log produced with ``sensitivity=True``; otherwise the gradient is
    ``None``.
    """
    terms = loss_terms(log)
    L = total_loss(terms, alpha1, alpha2)
    log.loss = {"L": L, "L_Eul": terms[0], "L_pos": terms[1], "L_ctrl": terms[2]}
    if log.dx_dtheta is None:
        return L, None

    grad = np.zeros(N_THETA)
    dLdx = np.zeros_like(log.x)
    dLdx[1:, EUL] = 2.0 * alpha1 * (log.x[1:, EUL] - log.x_ref[1:, EUL])
    dLdx[1:, POS] = 2.0 * alpha2 * (log.x[1:, POS] - log.x_ref[1:, POS])
    grad += np.einsum("js,jst->t", dLdx[1:], log.dx_dtheta[1:])

    u = log.u
    dLdu = np.zeros_like(u)
    if u.shape[0] > 1:
        d = np.diff(u, axis=0)       # d[j-1] = u_j - u_{j-1}
        dLdu[1:] += 2.0 * d
        dLdu[:-1] -= 2.0 * d
    grad += np.einsum("ju,jut->t", dLdu, log.du_dtheta)
    log.grad = grad
    return L, grad


def rollout_with_sensitivity(theta: MpcTheta, cfg: TuneConfig, setup: SimSetup | None = None,
                             nets=None) -> RolloutLog:
    """Differentiable rollout; ``nets`` is an optional ``(force, moment)`` pair."""
    setup = setup or SimSetup()
    act = NominalActuation() if nets is None else LearnedActuation(*nets)
    log = run_closed_loop(theta, cfg.trajectory, setup, actuation=act, sensitivity=True,
                          n_steps=cfg.horizon_steps)
    loss_and_gradient(log, cfg.alpha1, cfg.alpha2)
    return log


def block_scales(theta, grad) -> np.ndarray:
    """Per-entry normaliser for relative steps: each block's largest ``|theta * grad|``."""
    s = np.abs(np.asarray(theta, dtype=float) * np.asarray(grad, dtype=float))
    out = np.empty(N_THETA)
    for blk in (slice(0, N_Q), slice(N_Q, N_THETA)):
        out[blk] = s[blk].max()
    return out


def update(theta, grad, cfg: TuneConfig, scale: float = 1.0, ref=None) -> np.ndarray:
    """One projected gradient step with per-block rates.

    In ``relative`` mode the step is taken on ``log theta``: entry ``i`` moves
    by ``-beta * theta_i * clip(theta_i * grad_i / ref_i, -1, 1)``.  ``ref``
    holds the block normalisers from :func:`block_scales`, normally fixed at
    the first iteration so that steps shrink as the gradient does; by default
    the current gradient is used.
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    beta = np.r_[np.full(N_Q, cfg.beta_q), np.full(N_THETA - N_Q, cfg.beta_r)] * scale
    if cfg.step_mode == "raw":
        step = beta * grad
    else:
        ref = block_scales(theta, grad) if ref is None else np.asarray(ref, dtype=float)
        s = theta * grad
        rel = np.divide(s, ref, out=np.zeros_like(s), where=ref > 0)
        step = beta * theta * np.clip(rel, -1.0, 1.0)
    lo, hi = cfg.bounds()
    return project(theta - step, lo, hi)


@dataclass
class TuneResult:
    theta_best: MpcTheta
    best_iteration: int
    loss_history: list
    theta_history: list
    grad_history: list
    term_history: list
    aborted: bool = False


def tune(cfg: TuneConfig, setup: SimSetup | None = None, nets=None) -> TuneResult:
    """Projected gradient descent on the MPC weights.

    ``nets`` is ignored unless ``cfg.use_grfm_net`` is set.  A fall halves the
    step for that update and retries once; a second consecutive fall aborts.
    """
    setup = setup or SimSetup()
    nets = nets if cfg.use_grfm_net else None
    if cfg.use_grfm_net and nets is None:
        raise ValueError("use_grfm_net is set but no networks were given")

    theta = cfg.theta_init.flat
    log = rollout_with_sensitivity(MpcTheta.from_flat(theta), cfg, setup, nets)
    if log.fell:
        raise TuningFallError("initial parameters fall; nothing to tune")
    ref = block_scales(theta, log.grad)
    thetas, losses, grads, terms = [theta.copy()], [log.loss["L"]], [log.grad.copy()], [dict(log.loss)]
    aborted = False
    for it in range(1, cfg.iterations + 1):
        scale = 1.0
        for attempt in range(2):
            cand = update(theta, log.grad, cfg, scale, ref)
            cand_log = rollout_with_sensitivity(MpcTheta.from_flat(cand), cfg, setup, nets)
            if not cand_log.fell:
                break
            logger.warning("iteration %d: rollout fell, halving the step", it)
            scale *= 0.5
        else:
            aborted = True
            break
        theta, log = cand, cand_log
        thetas.append(theta.copy())
        losses.append(log.loss["L"])
        grads.append(log.grad.copy())
        terms.append(dict(log.loss))
        logger.info("iteration %d: L = %.6g", it, losses[-1])
    best = int(np.argmin(losses))
    return TuneResult(MpcTheta.from_flat(thetas[best]), best, losses, thetas, grads, terms, aborted)


class DiffTuner(BaseEstimator):
    """Estimator-style front end: ``fit(trajectory)`` learns ``theta_``."""

    def __init__(self, alpha1=1e5, alpha2=2e5, beta_q=0.05, beta_r=0.08, iterations=10,
                 theta_init=None, step_mode="relative", horizon_steps=None, setup=None,
                 nets=None):
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.beta_q = beta_q
        self.beta_r = beta_r
        self.iterations = iterations
        self.theta_init = theta_init
        self.step_mode = step_mode
        self.horizon_steps = horizon_steps
        self.setup = setup
        self.nets = nets

    def _config(self, trajectory):
        return TuneConfig(alpha1=self.alpha1, alpha2=self.alpha2, beta_q=self.beta_q,
                          beta_r=self.beta_r, iterations=self.iterations,
                          theta_init=self.theta_init or MpcTheta.nominal(),
                          use_grfm_net=self.nets is not None, trajectory=trajectory,
                          horizon_steps=self.horizon_steps, step_mode=self.step_mode)

    def fit(self, trajectory, y=None):
        if isinstance(trajectory, str):
            trajectory = gait_mod.preset(trajectory)
        result = tune(self._config(trajectory), self.setup, self.nets)
        self.result_ = result
        self.theta_ = result.theta_best
        self.loss_history_ = np.array(result.loss_history)
        return self

    def score(self, trajectory, y=None):
        """Negative loss of the fitted weights on ``trajectory`` (higher is better)."""
        if isinstance(trajectory, str):
            trajectory = gait_mod.preset(trajectory)
        cfg = replace(self._config(trajectory), theta_init=self.theta_)
        log = rollout_with_sensitivity(self.theta_, cfg, self.setup,
                                       self.nets)
        return -log.loss["L"]
