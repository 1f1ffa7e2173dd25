"""Exact minimization of an agent's local augmented Lagrangian.

The local problem is the convex QP

    min_{x in X_i}  f_i(x) + <lam, A_i x> + rho/2 ||A_i x + offset||^2

restricted to the rows ``Q_i`` where ``A_i`` is nonzero. Its Hessian
``Q_i + rho A_i'A_i`` does not change between iterations, so it is factored once
per ``(agent, rho)`` and cached on the problem.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .problem import Ball, Box, PartitionedProblem

__all__ = [
    "InnerSolverError",
    "QPResult",
    "LocalKernel",
    "LocalSubproblem",
    "power_iteration",
    "fixed_point_gap",
    "minimize_qp",
    "local_kernel",
    "shared_rows",
    "assemble",
    "assemble_from_messages",
    "solve_exact",
    "solve_with_stats",
]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000


class InnerSolverError(RuntimeError):
    """The inner QP solver hit its iteration cap."""

    def __init__(self, msg, gap=np.nan, agent=None, iteration=None):
        super().__init__(msg)
        self.gap = gap
        self.agent = agent
        self.iteration = iteration


@dataclass
class QPResult:
    x: np.ndarray
    iterations: int
    gap: float
    method: str


def power_iteration(H, rtol=1e-6, max_iter=5000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix.

    Falls back to the Frobenius norm (an upper bound) if the Rayleigh quotient
    has not settled to ``rtol`` within ``max_iter`` steps.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    if n == 0 or not np.any(H):
        return 0.0
    # deterministic start with no special alignment
    v = 1.0 + np.arange(n) / (n + 1.0)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = H @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = float(v @ w)
        v = w / nw
        if abs(new - est) <= rtol * abs(new):
            return max(new, nw)
        est = new
    return float(np.linalg.norm(H))


def fixed_point_gap(H, c, project, x) -> float:
    """``||x - P(x - grad)||`` with unit step; zero exactly at minimizers."""
    g = H @ x + c
    return float(np.linalg.norm(x - project(x - g)))


def _in_set(domain, x) -> bool:
    if isinstance(domain, Box):
        return bool(np.all(x >= domain.lo) and np.all(x <= domain.hi))
    if isinstance(domain, Ball):
        return bool(np.linalg.norm(x - domain.center) <= domain.radius)
    return bool(np.array_equal(domain.project(x), x))


def _solve_sym(M, rhs):
    try:
        L = np.linalg.cholesky(M)
        z = np.linalg.solve(L, rhs)
        return np.linalg.solve(L.T, z)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(M, rhs, rcond=None)[0]


def _polish_box(H, c, box: Box, x, tol, rounds):
    # active-set Newton: fix coordinates whose gradient pushes outward, solve the rest
    lo, hi = box.lo, box.hi
    for _ in range(rounds):
        g = H @ x + c
        at_lo = (x <= lo) & (g > 0)
        at_hi = (x >= hi) & (g < 0)
        free = ~(at_lo | at_hi)
        xn = x.copy()
        xn[at_lo] = lo[at_lo]
        xn[at_hi] = hi[at_hi]
        if free.any():
            fixed = ~free
            rhs = -(c[free] + H[np.ix_(free, fixed)] @ xn[fixed])
            xn[free] = _solve_sym(H[np.ix_(free, free)], rhs)
        xn = np.minimum(np.maximum(xn, lo), hi)
        if fixed_point_gap(H, c, box.project, xn) <= tol:
            return xn
        if np.array_equal(xn, x):
            return None
        x = xn
    return None


def _polish_ball(eig, H, c, ball: Ball, tol):
    # exact trust-region style solve in the eigenbasis of H
    w, V = eig
    ctr, r = ball.center, ball.radius
    g = c + H @ ctr
    gt = V.T @ g
    scale = max(float(w.max(initial=0.0)), 1.0)
    null = w <= 1e-13 * scale
    gnorm = float(np.linalg.norm(g))
    if not np.any(np.abs(gt[null]) > 1e-14 * max(gnorm, 1.0)):
        yt = np.zeros_like(gt)
        yt[~null] = -gt[~null] / w[~null]
        if np.linalg.norm(yt) <= r:
            x = ctr + V @ yt
            if fixed_point_gap(H, c, ball.project, x) <= tol:
                return x
            return None
    if gnorm == 0.0:
        return None
    wpos = np.maximum(w, 0.0)
    lo = max(0.0, gnorm / r - float(wpos.max(initial=0.0)))
    hi = gnorm / r
    mu = lo if lo > 0 else min(hi, 1e-300 + hi * 1e-8)
    for _ in range(100):
        d = wpos + mu
        yn = float(np.linalg.norm(gt / d))
        h = 1.0 / yn - 1.0 / r
        if h < 0:
            lo = mu
        else:
            hi = mu
        if abs(h) * r <= 1e-15 or hi - lo <= 1e-16 * hi:
            break
        dh = float(np.sum(gt ** 2 / d ** 3)) / yn ** 3
        step = mu - h / dh if dh > 0 else np.nan
        mu = step if lo < step < hi else 0.5 * (lo + hi)
    x = ball.project(ctr + V @ (-gt / (wpos + mu)))
    if fixed_point_gap(H, c, ball.project, x) <= tol:
        return x
    return None


def _polish(H, c, domain, x, tol, eig=None):
    if isinstance(domain, Box):
        return _polish_box(H, c, domain, x, tol, rounds=2 * x.shape[0] + 2)
    if isinstance(domain, Ball):
        if eig is None:
            eig = np.linalg.eigh(H)
        return _polish_ball(eig, H, c, domain, tol)
    return None


def minimize_qp(H, c, domain, x0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                lipschitz=None, chol=None, eig=None, polish_every=25) -> QPResult:
    """Minimize ``0.5 x'Hx + c'x`` over ``domain`` to a fixed-point gap ``tol``.

    Parameters
    ----------
    H : ndarray
        Symmetric PSD Hessian.
    c : ndarray
        Linear term.
    domain : Box, Ball or ProductSet
        Feasible set with exact Euclidean projection.
    x0 : ndarray
        Warm start; projected onto ``domain`` first.
    tol : float
        Required ``||x - P(x - (Hx + c))||``.
    lipschitz : float, optional
        Step constant; computed by power iteration (inflated 1%) when omitted.
    chol : ndarray, optional
        Lower Cholesky factor of ``H`` when it is positive definite. Enables
        the interior shortcut.
    eig : tuple, optional
        ``(w, V)`` eigen-decomposition of ``H`` for the exact ball solve.

    Returns
    -------
    QPResult

    Raises
    ------
    InnerSolverError
        If the gap is still above ``tol`` after ``max_iter`` accelerated
        projected-gradient steps.
    """
    project = domain.project
    x = project(np.asarray(x0, dtype=float))
    if chol is not None:
        xu = -np.linalg.solve(chol.T, np.linalg.solve(chol, c))
        if _in_set(domain, xu) and fixed_point_gap(H, c, project, xu) <= tol:
            return QPResult(xu, 0, fixed_point_gap(H, c, project, xu), "interior")
    gap = fixed_point_gap(H, c, project, x)
    if gap <= tol:
        return QPResult(x, 0, gap, "warm")
    xp = _polish(H, c, domain, x, tol, eig)
    if xp is not None:
        return QPResult(xp, 0, fixed_point_gap(H, c, project, xp), "polish")

    L = lipschitz if lipschitz is not None else 1.01 * power_iteration(H)
    L = max(L, 1e-300)
    y = x.copy()
    t = 1.0
    for it in range(1, max_iter + 1):
        xn = project(y - (H @ y + c) / L)
        gap = fixed_point_gap(H, c, project, xn)
        if gap <= tol:
            return QPResult(xn, it, gap, "apg")
        if float((y - xn) @ (xn - x)) > 0.0:
            t = 1.0
            y = xn.copy()
        else:
            tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = xn + ((t - 1.0) / tn) * (xn - x)
            t = tn
        x = xn
        if polish_every and it % polish_every == 0:
            xp = _polish(H, c, domain, x, tol, eig)
            if xp is not None:
                return QPResult(xp, it, fixed_point_gap(H, c, project, xp), "apg+polish")
    raise InnerSolverError(f"inner solver failed: gap {gap:.3e} > tol {tol:.1e} after {max_iter} iterations", gap)


@dataclass(frozen=True)
class LocalKernel:
    """Per-(agent, rho) data of the local QP that never changes across iterations."""

    agent: int
    rho: float
    rows: np.ndarray
    D: np.ndarray
    H: np.ndarray
    lipschitz: float
    chol: np.ndarray | None
    eig: tuple | None


_KERNELS: "weakref.WeakKeyDictionary[PartitionedProblem, dict]" = weakref.WeakKeyDictionary()


def local_kernel(problem: PartitionedProblem, i: int, rho: float) -> LocalKernel:
    per = _KERNELS.setdefault(problem, {})
    key = (i, float(rho))
    k = per.get(key)
    if k is None:
        D = problem.local_block(i)
        H = problem.objectives[i].hessian() + rho * (D.T @ D)
        H = 0.5 * (H + H.T)
        chol = None
        if H.size:
            try:
                chol = np.linalg.cholesky(H)
                # reject numerically singular factors
                d = np.abs(np.diag(chol))
                if d.min() <= 1e-8 * max(d.max(), 1e-300):
                    chol = None
            except np.linalg.LinAlgError:
                chol = None
        eig = np.linalg.eigh(H) if isinstance(problem.sets[i], Ball) else None
        k = LocalKernel(i, float(rho), problem.support(i), D, H, 1.01 * power_iteration(H), chol, eig)
        per[key] = k
    return k


def shared_rows(problem: PartitionedProblem, i: int, j: int):
    """Positions of ``Q_i & Q_j`` inside agent i's and agent j's supports."""
    key = ("shared", i, j)
    cache = problem._cache
    if key not in cache:
        si, sj = problem.support(i), problem.support(j)
        common, pi, pj = np.intersect1d(si, sj, assume_unique=True, return_indices=True)
        cache[key] = (common, pi, pj)
    return cache[key]


@dataclass
class LocalSubproblem:
    """Agent ``i``'s local AL with the other agents frozen.

    ``lam`` and ``offset`` are indexed by the agent's support rows only;
    ``offset_l = sum_{j != i} [A_j x_j]_l - b_l``.
    """

    agent: int
    rho: float
    rows: np.ndarray
    lam: np.ndarray
    offset: np.ndarray
    warm: np.ndarray
    kernel: LocalKernel
    problem: PartitionedProblem

    def linear_term(self) -> np.ndarray:
        f = self.problem.objectives[self.agent]
        return f.q + self.kernel.D.T @ (self.lam + self.rho * self.offset)

    def value(self, xi) -> float:
        """Local AL value over the support rows (rows outside are constants)."""
        xi = np.asarray(xi, dtype=float)
        f = self.problem.objectives[self.agent]
        ax = self.kernel.D @ xi
        return f.value(xi) + float(self.lam @ ax) + 0.5 * self.rho * float(np.sum((ax + self.offset) ** 2))

    def gradient(self, xi) -> np.ndarray:
        return self.kernel.H @ np.asarray(xi, dtype=float) + self.linear_term()


def assemble_from_messages(problem: PartitionedProblem, i: int, x_own, primal: Mapping[int, np.ndarray],
                           duals: np.ndarray, rho: float) -> LocalSubproblem:
    """Build the local subproblem from what agent ``i`` has received.

    ``primal[j]`` holds ``[A_j x_j]_l`` for ``l`` in ``Q_i & Q_j`` (ordered as
    those rows); ``duals`` holds ``lam_l`` for ``l`` in ``Q_i``. Contributions
    are accumulated in ascending sender order.
    """
    rows = problem.support(i)
    if duals.shape != rows.shape:
        raise ValueError(f"agent {i}: expected {rows.shape[0]} dual rows, got {duals.shape}")
    offset = np.zeros(rows.shape[0])
    for j in sorted(primal):
        if j == i:
            continue
        _, pi, _ = shared_rows(problem, i, j)
        offset[pi] += primal[j]
    offset -= problem.b[rows]
    kern = local_kernel(problem, i, rho)
    return LocalSubproblem(i, float(rho), rows, np.asarray(duals, dtype=float), offset,
                           np.asarray(x_own, dtype=float), kern, problem)


def assemble(problem: PartitionedProblem, i: int, x_snapshot, lam, rho: float,
             contributions=None) -> LocalSubproblem:
    """Local subproblem of agent ``i`` at the stacked snapshot ``x_snapshot``."""
    parts = problem.split(x_snapshot)
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (problem.m,):
        raise ValueError(f"lambda has shape {lam.shape}, expected ({problem.m},)")
    if contributions is None:
        contributions = [problem.contribution(j, parts[j]) for j in range(problem.N)]
    primal = {}
    for j in range(problem.N):
        if j == i:
            continue
        common, _, pj = shared_rows(problem, i, j)
        if common.size:
            primal[j] = contributions[j][pj]
    return assemble_from_messages(problem, i, parts[i], primal, lam[problem.support(i)], rho)


def solve_with_stats(sub: LocalSubproblem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> QPResult:
    k = sub.kernel
    dom = sub.problem.sets[sub.agent]
    try:
        return minimize_qp(k.H, sub.linear_term(), dom, sub.warm, tol=tol, max_iter=max_iter,
                           lipschitz=k.lipschitz, chol=k.chol, eig=k.eig)
    except InnerSolverError as exc:
        exc.agent = sub.agent
        raise


def solve_exact(sub: LocalSubproblem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> np.ndarray:
    """Minimizer of the local AL over the agent's set, certified to ``tol``."""
    return solve_with_stats(sub, tol, max_iter).x
