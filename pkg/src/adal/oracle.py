"""Centralized reference solver.

Solves the full coupled problem with the classic method of multipliers on the
stacked variables. It shares nothing with the distributed path except the
projected-gradient QP kernel, which is what makes it usable as ground truth
for ADAL runs.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag

from .local_solver import InnerSolverError, minimize_qp, power_iteration
from .problem import Box, PartitionedProblem, objective_value, product_of, residual

__all__ = [
    "OracleError",
    "SaddlePoint",
    "stacked_qp",
    "solve_centralized",
    "dual_value",
    "lagrangian",
    "gram_singular_values",
    "box_qp_kkt",
]


class OracleError(RuntimeError):
    pass


@dataclass
class SaddlePoint:
    x_star: np.ndarray
    lambda_star: np.ndarray
    F_star: float
    kkt_residual: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "x_star": self.x_star.tolist(),
            "lambda_star": self.lambda_star.tolist(),
            "F_star": self.F_star,
            "kkt_residual": self.kkt_residual,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def stacked_qp(problem: PartitionedProblem):
    """Dense stacked data ``(H, c, A, b, X)`` with ``F(x) = 0.5 x'Hx + c'x + const``."""
    H = block_diag(*[f.hessian() for f in problem.objectives]) if problem.N else np.zeros((0, 0))
    c = np.concatenate([f.q for f in problem.objectives])
    return H, c, problem.dense_A(), problem.b.copy(), product_of(problem.sets)


def lagrangian(problem: PartitionedProblem, x, lam) -> float:
    return objective_value(problem, x) + float(np.asarray(lam) @ residual(problem, x))


def _kkt_residual(H, c, A, b, X, x, lam) -> float:
    g = H @ x + c + A.T @ lam
    stat = np.max(np.abs(x - X.project(x - g)), initial=0.0)
    return float(max(stat, np.max(np.abs(A @ x - b), initial=0.0)))


def _refine_box(H, c, A, b, X: Box, x, lam, scale):
    # fix the active bounds of x and solve the equality-constrained KKT system
    g = H @ x + c + A.T @ lam
    tol = 1e-7 * scale
    at_lo = (x - X.lo <= tol) & (g > 0)
    at_hi = (X.hi - x <= tol) & (g < 0)
    free = ~(at_lo | at_hi)
    xf = x.copy()
    xf[at_lo] = X.lo[at_lo]
    xf[at_hi] = X.hi[at_hi]
    nf, m = int(free.sum()), A.shape[0]
    K = np.zeros((nf + m, nf + m))
    K[:nf, :nf] = H[np.ix_(free, free)]
    K[:nf, nf:] = A[:, free].T
    K[nf:, :nf] = A[:, free]
    fixed = ~free
    rhs = np.concatenate([-(c[free] + H[np.ix_(free, fixed)] @ xf[fixed]), b - A[:, fixed] @ xf[fixed]])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    xf[free] = sol[:nf]
    return X.project(xf), sol[nf:]


def solve_centralized(problem: PartitionedProblem, tol: float = 1e-10, max_outer: int = 5000) -> SaddlePoint:
    """Saddle point ``(x*, lam*)`` of the Lagrangian by the method of multipliers.

    Raises
    ------
    OracleError
        If no point of ``X`` satisfies ``Ax = b`` (to a 1e-6 relative
        tolerance), if the multipliers grow without bound, or if the outer loop
        does not settle within ``max_outer`` iterations.
    """
    H, c, A, b, X = stacked_qp(problem)
    m, n = A.shape
    sA = float(np.linalg.norm(A, 2)) if A.size else 0.0
    hmax = power_iteration(H) if n else 0.0
    scale = max(1.0, float(np.abs(b).max(initial=0.0)), X.diameter())

    x = X.project(np.zeros(n))
    if m:
        if sA == 0.0:
            if np.any(b != 0.0):
                raise OracleError("infeasible or unbounded multiplier growth: A = 0 but b != 0")
        else:
            feas = minimize_qp(A.T @ A, -A.T @ b, X, x, tol=1e-12 * sA * sA * scale, max_iter=200_000)
            x = feas.x
            if np.linalg.norm(A @ x - b) > 1e-6 * (1.0 + np.linalg.norm(b)):
                raise OracleError(
                    f"infeasible or unbounded multiplier growth: min ||Ax - b|| over X is "
                    f"{np.linalg.norm(A @ x - b):.3e}")

    lam = np.zeros(m)
    it = 0
    if m and sA > 0:
        rho = 10.0 * max(hmax, 1.0) / sA ** 2
        Hp = H + rho * (A.T @ A)
        Hp = 0.5 * (Hp + Hp.T)
        Lp = 1.01 * power_iteration(Hp)
        try:
            chol = np.linalg.cholesky(Hp)
        except np.linalg.LinAlgError:
            chol = None
        inner_tol = max(tol * 1e-2, 1e-15 * max(Lp, 1.0) * scale)
        from .certification import dual_bound_value  # late import, certification uses the oracle too
        guard = 1e6 * max(dual_bound_value(problem), 1.0)
        for it in range(1, max_outer + 1):
            lin = c + A.T @ (lam - rho * b)
            try:
                x = minimize_qp(Hp, lin, X, x, tol=inner_tol, lipschitz=Lp, chol=chol, max_iter=200_000).x
            except InnerSolverError as exc:
                raise OracleError(f"no convergence: inner solve failed at outer iteration {it}: {exc}") from exc
            r = A @ x - b
            lam = lam + rho * r
            if np.linalg.norm(lam) > guard:
                raise OracleError("infeasible or unbounded multiplier growth")
            if np.max(np.abs(r)) <= tol and rho * np.max(np.abs(r)) <= tol:
                break
        else:
            raise OracleError(f"no convergence after {max_outer} multiplier updates")
    elif n:
        x = minimize_qp(H, c, X, x, tol=tol).x

    kkt = _kkt_residual(H, c, A, b, X, x, lam)
    if isinstance(X, Box) and m:
        xr, lr = _refine_box(H, c, A, b, X, x, lam, scale)
        kr = _kkt_residual(H, c, A, b, X, xr, lr)
        if kr < kkt:
            x, lam, kkt = xr, lr, kr
    return SaddlePoint(x, lam, objective_value(problem, x), kkt, it)


def dual_value(problem: PartitionedProblem, lam) -> float:
    """``g(lam) = sum_i min_{x_i in X_i} [f_i(x_i) + <lam, A_i x_i>] - <b, lam>``."""
    lam = np.asarray(lam, dtype=float)
    total = 0.0
    for i, (f, s) in enumerate(zip(problem.objectives, problem.sets)):
        rows = problem.support(i)
        D = problem.local_block(i)
        lin = f.q + D.T @ lam[rows]
        xi = minimize_qp(f.hessian(), lin, s, s.center_point(), tol=1e-12).x
        total += f.value(xi) + float(lam[rows] @ (D @ xi))
    return total - float(problem.b @ lam)


def gram_singular_values(A) -> np.ndarray:
    """Singular values from the eigenvalues of the smaller Gram matrix, descending."""
    A = np.asarray(A, dtype=float)
    G = A @ A.T if A.shape[0] <= A.shape[1] else A.T @ A
    ev = np.linalg.eigvalsh(G)
    return np.sqrt(np.clip(ev, 0.0, None))[::-1]


def box_qp_kkt(H, c, lo, hi):
    """Minimizer of ``0.5 x'Hx + c'x`` on a box by enumerating active sets.

    Every coordinate is tried free, at its lower bound, or at its upper bound;
    the candidate satisfying the KKT sign conditions with the lowest objective
    wins. Exponential in ``n``; meant for checking small problems.
    """
    H = np.asarray(H, dtype=float)
    c = np.asarray(c, dtype=float)
    n = c.shape[0]
    best, best_val = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=n):
        p = np.array(pattern)
        free = p == 0
        x = np.where(p == 1, lo, hi).astype(float)
        if free.any():
            fixed = ~free
            rhs = -(c[free] + H[np.ix_(free, fixed)] @ x[fixed])
            try:
                x[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
            except np.linalg.LinAlgError:
                continue
            if np.any(x[free] < lo[free] - 1e-12) or np.any(x[free] > hi[free] + 1e-12):
                continue
        g = H @ x + c
        if np.any(g[p == 1] < -1e-9) or np.any(g[p == 2] > 1e-9):
            continue
        val = 0.5 * x @ H @ x + c @ x
        if val < best_val:
            best, best_val = x, val
    if best is None:
        raise OracleError("no KKT point found by enumeration")
    return best
