"""Dense dual active-set solver for tiny convex QPs.

Solves ``min 0.5 x^T H x + g^T x`` subject to ``A x >= b`` and
``lb <= x <= ub`` following Goldfarb and Idnani: start at the unconstrained
minimiser and repeatedly add the most violated constraint, dropping active
constraints whose multipliers would turn negative.  Infeasibility shows up
as a violated constraint that no primal or dual step can repair.
"""

from __future__ import annotations

import numpy as np


class QPInfeasibleError(RuntimeError):
    def __init__(self, message: str, active_set: list[int], violated: int | None = None):
        super().__init__(message)
        self.active_set = active_set
        self.violated = violated


def _stack_constraints(n, A, b, lb, ub):
    rows, rhs = [], []
    if A is not None and len(A):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        rows.append(A)
        rhs.append(np.asarray(b, dtype=float).reshape(-1))
    eye = np.eye(n)
    if lb is not None:
        lb = np.asarray(lb, dtype=float) * np.ones(n)
        keep = np.isfinite(lb)
        rows.append(eye[keep])
        rhs.append(lb[keep])
    if ub is not None:
        ub = np.asarray(ub, dtype=float) * np.ones(n)
        keep = np.isfinite(ub)
        rows.append(-eye[keep])
        rhs.append(-ub[keep])
    if not rows:
        return np.zeros((0, n)), np.zeros(0)
    return np.vstack(rows), np.concatenate(rhs)


def solve_qp(H, g, A=None, b=None, lb=None, ub=None, tol: float = 1e-12,
             max_iter: int = 200) -> np.ndarray:
    """Minimise ``0.5 x'Hx + g'x`` s.t. ``A x >= b``, ``lb <= x <= ub``.

    Raises :class:`QPInfeasibleError` when the constraint set is empty.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = len(g)
    C, d = _stack_constraints(n, A, b, lb, ub)
    try:
        L_inv = np.linalg.inv(np.linalg.cholesky(H))
    except np.linalg.LinAlgError as exc:
        raise ValueError("H must be symmetric positive definite") from exc
    H_inv = L_inv.T @ L_inv

    x = -H_inv @ g
    active: list[int] = []
    u = np.zeros(0)
    scale = 1.0 + np.abs(d)

    for _ in range(max_iter):
        slack = C @ x - d
        if len(active):
            slack[active] = 0.0
        viol = slack / scale
        p = int(np.argmin(viol)) if len(viol) else -1
        if p < 0 or viol[p] >= -tol:
            return x
        n_p = C[p]
        u_p = 0.0
        while True:
            if active:
                N = C[active].T
                M = N.T @ H_inv @ N
                r = np.linalg.solve(M, N.T @ H_inv @ n_p)
                z = H_inv @ n_p - H_inv @ N @ r
            else:
                r = np.zeros(0)
                z = H_inv @ n_p
            # dual step limit: keep multipliers of active constraints >= 0
            t1, k_drop = np.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-14 and u[j] / rj < t1:
                    t1, k_drop = u[j] / rj, j
            zn = z @ n_p
            s_p = n_p @ x - d[p]
            t2 = -s_p / zn if zn > 1e-14 * (1.0 + n_p @ n_p) else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise QPInfeasibleError("QP constraints are infeasible", [int(a) for a in active], p)
            t = min(t1, t2)
            if np.isfinite(t2):
                x = x + t * z
            u = u - t * r
            u_p += t
            if t == t2:
                active.append(p)
                u = np.append(u, u_p)
                break
            del active[k_drop]
            u = np.delete(u, k_drop)
    raise RuntimeError("active-set iteration limit reached")


def kkt_residual(H, g, A, b, lb, ub, x) -> dict:
    """Stationarity / feasibility diagnostics for a candidate solution.

    Multipliers are recovered by non-negative least squares over the
    constraints active at ``x``.
    """
    from scipy.optimize import nnls

    H = np.asarray(H, float)
    g = np.asarray(g, float)
    n = len(g)
    C, d = _stack_constraints(n, A, b, lb, ub)
    slack = C @ x - d
    grad = H @ x + g
    act = np.where(np.abs(slack) <= 1e-7 * (1 + np.abs(d)))[0]
    if len(act):
        lam, res = nnls(C[act].T, grad)
    else:
        lam, res = np.zeros(0), np.linalg.norm(grad)
    return {
        "stationarity": float(res),
        "primal_violation": float(max(0.0, -slack.min())) if len(slack) else 0.0,
        "active": act,
        "multipliers": lam,
    }
