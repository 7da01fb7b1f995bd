"""Dense strictly convex QP solver (primal active set).

Problem form::

    minimize   1/2 u' H u + f' u
    subject to G u <= h

Two pieces of structure may be declared on the problem so that degenerate
encodings are handled exactly instead of numerically:

* ``eq_pairs`` lists row pairs ``(i, j)`` with ``G[j] = -G[i]`` and
  ``h[j] = -h[i]``, i.e. an equality written as two inequalities;
* ``fixed`` marks variables that the constraints force to zero (for example
  every component of a swing foot's wrench).  They are eliminated before the
  active-set iterations and their multipliers are recovered afterwards by
  non-negative least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog, nnls


class QPError(RuntimeError):
    pass


class QPInfeasibleError(QPError):
    """The constraint set is empty."""


class QPMaxIterError(QPError):
    """Iteration budget exhausted; ``best`` holds the last iterate."""

    def __init__(self, msg, best=None, residual=np.inf):
        super().__init__(msg)
        self.best = best
        self.residual = residual


@dataclass
class QP:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray
    eq_pairs: tuple = ()
    fixed: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, self.f.size)
        self.h = np.asarray(self.h, dtype=float)
        if self.fixed is None:
            self.fixed = np.zeros(self.f.size, dtype=bool)
        self.fixed = np.asarray(self.fixed, dtype=bool)
        if self.H.shape != (self.f.size, self.f.size) or self.h.size != self.G.shape[0]:
            raise ValueError("inconsistent QP dimensions")

    @property
    def n(self) -> int:
        return self.f.size

    @property
    def m(self) -> int:
        return self.h.size

    def objective(self, u) -> float:
        return float(0.5 * u @ self.H @ u + self.f @ u)


@dataclass
class Reduction:
    """Index bookkeeping between the full and the reduced problem."""

    free: np.ndarray        # indices of free variables
    rows: np.ndarray        # full-row index of each reduced row
    is_eq: np.ndarray       # reduced row is an equality
    partner: np.ndarray     # full-row index of the mirrored row for equalities, else -1
    pinned: np.ndarray      # full rows touching only fixed variables


@dataclass
class QPSolution:
    u: np.ndarray
    duals: np.ndarray
    active: np.ndarray              # full-row indices treated as active
    working: np.ndarray             # reduced-row indices in the final working set
    reduction: Reduction
    objective: float
    kkt_residual: float
    iterations: int
    objective_history: list = field(default_factory=list)
    status: str = "optimal"


def reduce_qp(qp: QP) -> Reduction:
    free = np.flatnonzero(~qp.fixed)
    touches_free = np.any(qp.G[:, free] != 0.0, axis=1)
    pinned = np.flatnonzero(~touches_free)
    partner_of = {}
    for i, j in qp.eq_pairs:
        partner_of[i] = j
        partner_of[j] = -2  # mirrored row, dropped
    rows, is_eq, partner = [], [], []
    for r in np.flatnonzero(touches_free):
        p = partner_of.get(int(r), -1)
        if p == -2:
            continue
        rows.append(r)
        is_eq.append(p >= 0)
        partner.append(p)
    return Reduction(free, np.array(rows, dtype=int), np.array(is_eq, dtype=bool),
                     np.array(partner, dtype=int), pinned)


def _feasible_start(G, h, is_eq, tol):
    n = G.shape[1]
    x = np.zeros(n)
    viol = G @ x - h
    if np.all(viol[~is_eq] <= tol) and np.all(np.abs(viol[is_eq]) <= tol):
        return x
    res = linprog(np.zeros(n), A_ub=G[~is_eq] if np.any(~is_eq) else None,
                  b_ub=h[~is_eq] if np.any(~is_eq) else None,
                  A_eq=G[is_eq] if np.any(is_eq) else None,
                  b_eq=h[is_eq] if np.any(is_eq) else None,
                  bounds=[(None, None)] * n, method="highs")
    if res.status == 2:
        raise QPInfeasibleError("QP constraints are infeasible")
    if not res.success:
        raise QPError(f"phase-1 LP failed: {res.message}")
    return res.x


def solve_qp(qp: QP, tol: float = 1e-10, max_iter: int | None = None) -> QPSolution:
    """Solve ``qp`` to a KKT point; raises on infeasibility or iteration exhaustion."""
    red = reduce_qp(qp)
    pinned_h = qp.h[red.pinned]
    if np.any(pinned_h < -tol):
        raise QPInfeasibleError("a constraint on fixed variables cannot be met at zero")

    free = red.free
    H = qp.H[np.ix_(free, free)]
    f = qp.f[free]
    G = qp.G[np.ix_(red.rows, free)]
    h = qp.h[red.rows]
    n, m = f.size, h.size
    if max_iter is None:
        max_iter = 10 * (n + m) + 50

    try:
        chol = sla.cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise QPError("reduced Hessian is not positive definite") from exc

    x = _feasible_start(G, h, red.is_eq, 1e-12) if n else np.zeros(0)
    x_unc = -sla.cho_solve(chol, f) if n else np.zeros(0)
    HiGt = sla.cho_solve(chol, G.T) if m else np.zeros((n, 0))
    GHG = G @ HiGt
    row_norm = np.linalg.norm(G, axis=1)

    W = [int(i) for i in np.flatnonzero(red.is_eq)]
    history = [0.5 * x @ H @ x + f @ x]
    scale = 1.0 + np.abs(f).max(initial=0.0) + np.abs(H).max(initial=0.0)
    status = "max_iter"
    it = 0
    lam = np.zeros(0)
    at_min = False      # a full unblocked step lands on the working-set minimiser
    for it in range(1, max_iter + 1):
        d = x - x_unc
        if W:
            S = GHG[np.ix_(W, W)]
            rhs = -(G[W] @ d)
            lam = np.linalg.solve(S, rhs)
            p = -d - HiGt[:, W] @ lam
        else:
            lam = np.zeros(0)
            p = -d
        if at_min or np.abs(p).max(initial=0.0) <= 1e-13 * (1.0 + np.abs(x).max(initial=0.0)):
            at_min = False
            ineq_pos = [k for k, w in enumerate(W) if not red.is_eq[w]]
            if not ineq_pos:
                status = "optimal"
                break
            k_min = min(ineq_pos, key=lambda k: lam[k])
            if lam[k_min] >= -tol * scale:
                status = "optimal"
                break
            W.pop(k_min)
            continue
        in_w = np.zeros(m, dtype=bool)
        in_w[W] = True
        Gp = G @ p
        slack = h - G @ x
        cand = np.flatnonzero(~in_w & (Gp > 1e-11 * row_norm * np.abs(p).max()))
        alpha, block = 1.0, -1
        while cand.size:
            ratios = np.maximum(slack[cand], 0.0) / Gp[cand]
            k = int(np.argmin(ratios))
            if ratios[k] >= 1.0:
                break
            b = int(cand[k])
            if _dependent(GHG, W, b):
                # only round-off makes a dependent row look blocking; skip it
                cand = np.delete(cand, k)
                continue
            alpha, block = float(ratios[k]), b
            break
        x = x + alpha * p
        at_min = block < 0
        history.append(0.5 * x @ H @ x + f @ x)
        if block >= 0:
            W.append(block)

    if status != "optimal":
        best = np.zeros(qp.n)
        best[free] = x
        raise QPMaxIterError(f"active-set solver hit {max_iter} iterations", best=best)

    # polish: solve the KKT system of the final working set directly
    W = sorted(W)
    if n:
        x, lam = _kkt_solve(H, f, G[W], h[W])
    u = np.zeros(qp.n)
    u[free] = x
    duals = _assemble_duals(qp, red, W, lam, u)
    active = _active_rows(red, W)
    res = kkt_residual(qp, u, duals)
    return QPSolution(u=u, duals=duals, active=active, working=np.array(W, dtype=int),
                      reduction=red, objective=qp.objective(u), kkt_residual=res,
                      iterations=it, objective_history=history, status=status)


def _dependent(GHG, W, b, rtol=1e-9) -> bool:
    """Is row ``b`` numerically in the span of the working rows (``H^-1`` metric)?"""
    gbb = GHG[b, b]
    if not W:
        return gbb <= 0.0
    c = GHG[W, b]
    resid = gbb - c @ np.linalg.solve(GHG[np.ix_(W, W)], c)
    return resid <= rtol * gbb


def _kkt_solve(H, f, Gw, hw):
    n, k = H.shape[0], Gw.shape[0]
    K = np.zeros((n + k, n + k))
    K[:n, :n] = H
    K[:n, n:] = Gw.T
    K[n:, :n] = Gw
    rhs = np.concatenate([-f, hw])
    sol = np.linalg.solve(K, rhs)
    # one step of iterative refinement
    sol = sol + np.linalg.solve(K, rhs - K @ sol)
    return sol[:n], sol[n:]


def _assemble_duals(qp: QP, red: Reduction, W, lam, u):
    duals = np.zeros(qp.m)
    for k, w in enumerate(W):
        r = red.rows[w]
        if red.is_eq[w]:
            duals[r] = max(lam[k], 0.0)
            duals[red.partner[w]] = max(-lam[k], 0.0)
        else:
            duals[r] = lam[k]
    if red.pinned.size:
        fixed = np.flatnonzero(qp.fixed)
        grad = qp.H[fixed] @ u + qp.f[fixed] + qp.G[:, fixed].T @ duals
        tight = red.pinned[np.abs(qp.h[red.pinned]) <= 1e-12]
        if tight.size:
            A = qp.G[np.ix_(tight, fixed)].T
            lam_p, _ = nnls(A, -grad)
            duals[tight] = lam_p
    return duals


def _active_rows(red: Reduction, W):
    rows = []
    for w in W:
        rows.append(red.rows[w])
        if red.is_eq[w]:
            rows.append(red.partner[w])
    return np.array(sorted(rows), dtype=int)


def kkt_residual(qp: QP, u, duals) -> float:
    """Max of stationarity, primal/dual feasibility and complementarity (infinity norms)."""
    stat = np.abs(qp.H @ u + qp.f + qp.G.T @ duals).max(initial=0.0)
    slack = qp.h - qp.G @ u
    primal = np.maximum(-slack, 0.0).max(initial=0.0)
    dual = np.maximum(-duals, 0.0).max(initial=0.0)
    comp = np.abs(duals * slack).max(initial=0.0)
    return float(max(stat, primal, dual, comp))
