"""A-priori certificates: diameters, gradient bounds, singular values and
the resulting optimal penalties and iteration counts.

Everything here is computed from the problem data alone; no iterate or
reference solution is consulted.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .problem import Ball, Box, ConvexObjective, PartitionedProblem, ProductSet, max_degree

__all__ = [
    "CertificationError",
    "CertificationReport",
    "diameter",
    "set_gradient_bound",
    "subgradient_bound",
    "jacobi_singular_values",
    "singular_values",
    "dual_bound",
    "dual_bound_value",
    "certify",
    "certified_ceil",
]

VERTEX_ENUM_MAX = 16
JACOBI_MAX_COLS = 256
DENSE_MAX_ENTRIES = 4_000_000
RANK_RTOL = 1e-12
CEIL_SLACK = 1e-12
BALL_INFLATE = 1.001


class CertificationError(ValueError):
    pass


def diameter(problem: PartitionedProblem) -> float:
    """Diameter of the product set ``X`` under the stacked Euclidean norm."""
    return float(math.sqrt(sum(s.diameter() ** 2 for s in problem.sets)))


# gradient bound --------------------------------------------------------------

def _box_max_sq(Q, q, lo, hi) -> float:
    """``max ||Qx + q||^2`` over a box; the maximum of a convex function sits at a vertex."""
    n = q.shape[0]
    if n == 0:
        return 0.0
    if not np.any(Q):
        return float(q @ q)
    ncomp, label = connected_components((Q != 0).astype(np.int8), directed=False)
    total = 0.0
    for c in range(ncomp):
        idx = np.flatnonzero(label == c)
        Qc, qc, l, h = Q[np.ix_(idx, idx)], q[idx], lo[idx], hi[idx]
        if idx.size <= VERTEX_ENUM_MAX:
            V = np.array(list(itertools.product((0.0, 1.0), repeat=idx.size)))
            pts = l + V * (h - l)
            g = pts @ Qc.T + qc
            total += float(np.max(np.sum(g * g, axis=1)))
        else:
            # interval bound per row, a certified over-estimate
            mid, half = 0.5 * (l + h), 0.5 * (h - l)
            rowmax = np.abs(Qc @ mid + qc) + np.abs(Qc) @ half
            total += float(rowmax @ rowmax)
    return total


def _ball_max(Q, q, center, radius) -> float:
    """``max ||Qx + q||`` over a ball, by the secular equation in Q's eigenbasis."""
    a = Q @ center + q
    if radius == 0.0 or not np.any(Q):
        return float(np.linalg.norm(a))
    w, V = np.linalg.eigh(Q)
    at = V.T @ a
    # maximize sum_k (at_k + radius w_k u_k)^2 over the unit sphere
    s = radius * w
    smax = float(np.max(s * s))
    top = np.isclose(s * s, smax, rtol=1e-12, atol=0.0)

    def unorm(mu):
        return float(np.linalg.norm(s * at / (mu - s * s)))

    u = None
    if np.any(np.abs(at[top]) > 1e-14 * max(float(np.linalg.norm(at)), 1.0)):
        lo = smax
        hi = smax + float(np.max(np.abs(s))) * float(np.linalg.norm(at)) + 1.0
        while unorm(hi) > 1.0:
            hi = smax + 2.0 * (hi - smax)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if unorm(mid) > 1.0:
                lo = mid
            else:
                hi = mid
        u = s * at / (hi - s * s)
    else:
        # hard case: put the leftover length on the top eigendirection
        u = np.zeros_like(at)
        rest = ~top
        u[rest] = s[rest] * at[rest] / (smax - s[rest] ** 2)
        nu = float(np.linalg.norm(u))
        if nu > 1.0:
            u /= nu
        k = int(np.flatnonzero(top)[0])
        u[k] = math.sqrt(max(0.0, 1.0 - float(u @ u)))
    exact = float(np.linalg.norm(at + s * u))
    cap = float(np.linalg.norm(Q, 2)) * (float(np.linalg.norm(center)) + radius) + float(np.linalg.norm(q))
    return min(BALL_INFLATE * exact, cap)


def set_gradient_bound(f: ConvexObjective, s) -> float:
    """Upper bound on ``||grad f||`` over the set ``s``."""
    if f.Q is None or not np.any(f.Q):
        return float(np.linalg.norm(f.q))
    Q, q = f.Q, f.q
    if isinstance(s, Box):
        return math.sqrt(_box_max_sq(Q, q, s.lo, s.hi))
    if isinstance(s, Ball):
        return _ball_max(Q, q, s.center, s.radius)
    if isinstance(s, ProductSet):
        sl = list(s.slices())
        mask = np.zeros_like(Q, dtype=bool)
        for a, _ in sl:
            mask[a, a] = True
        if not np.any(Q[~mask]):
            total = 0.0
            for a, fac in sl:
                total += set_gradient_bound(ConvexObjective.quadratic(Q[a, a], q[a]), fac) ** 2
            return math.sqrt(total)
        # cross-factor coupling: norm bound over the enclosing ball
        radius = math.sqrt(sum((np.max(np.abs(np.vstack([fac.lo, fac.hi])), axis=0) ** 2).sum()
                               if isinstance(fac, Box) else (np.linalg.norm(fac.center) + fac.radius) ** 2
                               for _, fac in sl))
        return float(np.linalg.norm(Q, 2)) * radius + float(np.linalg.norm(q))
    raise CertificationError(f"unsupported set type {type(s).__name__}")


def subgradient_bound(problem: PartitionedProblem) -> float:
    """``G = max_i max_{x in X_i} ||grad f_i(x)||``."""
    return max((set_gradient_bound(f, s) for f, s in zip(problem.objectives, problem.sets)), default=0.0)


# singular values -------------------------------------------------------------

def jacobi_singular_values(A, tol=1e-15, max_sweeps=60) -> np.ndarray:
    """All singular values of ``A`` by one-sided Jacobi rotations, descending."""
    X = np.array(A, dtype=float)
    if X.ndim != 2:
        raise ValueError("expected a matrix")
    if X.shape[1] > X.shape[0]:
        X = X.T.copy()
    n = X.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for r in range(p + 1, n):
                xp, xr = X[:, p], X[:, r]
                alpha = float(xp @ xp)
                beta = float(xr @ xr)
                gamma = float(xp @ xr)
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                X[:, p], X[:, r] = c * xp - s * xr, s * xp + c * xr
        if not rotated:
            break
    return np.sort(np.linalg.norm(X, axis=0))[::-1]


def _all_singular_values(A) -> np.ndarray:
    m, n = A.shape
    if min(m, n) <= JACOBI_MAX_COLS and m * n <= DENSE_MAX_ENTRIES:
        return jacobi_singular_values(A)
    return np.linalg.svd(A, compute_uv=False)


def singular_values(problem: PartitionedProblem):
    """``(sigma_max, sigma_min_nz)`` of the stacked coupling matrix."""
    A = problem.dense_A()
    if A.size == 0:
        raise CertificationError("all singular values zero")
    sv = _all_singular_values(A)
    smax = float(sv[0])
    if smax == 0.0:
        raise CertificationError("all singular values zero")
    rank_tol = max(A.shape) * smax * RANK_RTOL
    nz = sv[sv > rank_tol]
    return smax, float(nz[-1])


def dual_bound(problem: PartitionedProblem, G=None, sigma_min_nz=None) -> float:
    """``sqrt(N) G / sigma_min_nz(A)``."""
    if G is None:
        G = subgradient_bound(problem)
    if sigma_min_nz is None:
        try:
            _, sigma_min_nz = singular_values(problem)
        except CertificationError as exc:
            raise CertificationError("coupling matrix numerically rank-zero") from exc
    return math.sqrt(problem.N) * G / sigma_min_nz


def dual_bound_value(problem: PartitionedProblem) -> float:
    """Like :func:`dual_bound` but ``inf`` instead of an error."""
    try:
        return dual_bound(problem)
    except CertificationError:
        return math.inf


# certificate -----------------------------------------------------------------

def certified_ceil(v: float) -> int:
    """Ceiling with a small upward slack so rounding never undercounts."""
    return max(1, int(math.ceil(v * (1.0 + CEIL_SLACK))))


@dataclass
class CertificationReport:
    N: int
    D_X: float
    G: float
    sigma_max: float
    sigma_min_nz: float
    q: int
    lambda_star_bound: float
    rho_star_1: float
    rho_star_2: float
    k_eps_1: int
    k_eps_2: int
    eps: float
    tau: float
    lam_bar0_norm: float = 0.0
    source: str = "a_priori"

    def ubnd1(self, rho: float) -> float:
        """Gap bound numerator as a function of the penalty (``lam_bar^0 = 0``)."""
        return rho * self.N * self.sigma_max ** 2 * self.D_X ** 2 + 1.0 / rho

    def ubnd2(self, rho: float) -> float:
        """Objective bound numerator with ``||lam*||`` replaced by the dual bound."""
        return (rho * self.N * self.sigma_max ** 2 * self.D_X ** 2
                + 4.0 / rho * self.N * self.G ** 2 / self.sigma_min_nz ** 2)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_table(self) -> str:
        labels = [
            ("N", "agents"), ("q", "max degree"), ("D_X", "diameter of X"), ("G", "gradient bound"),
            ("sigma_max", "largest singular value"), ("sigma_min_nz", "smallest nonzero singular value"),
            ("lambda_star_bound", "dual bound"), ("eps", "accuracy"), ("tau", "stepsize"),
            ("rho_star_1", "penalty (combined gap)"), ("k_eps_1", "iterations (combined gap)"),
            ("rho_star_2", "penalty (separate gaps)"), ("k_eps_2", "iterations (separate gaps)"),
            ("source", "bound source"),
        ]
        d = self.to_dict()
        width = max(len(t) for _, t in labels)
        lines = []
        for key, text in labels:
            v = d[key]
            vs = f"{v:.6g}" if isinstance(v, float) else str(v)
            lines.append(f"{text:<{width}}  {vs}")
        return "\n".join(lines) + "\n"


def certify(problem: PartitionedProblem, eps: float, tau=None, lam_bar0=None) -> CertificationReport:
    """Optimal penalties and iteration counts for accuracy ``eps``.

    Parameters
    ----------
    problem : PartitionedProblem
    eps : float
        Target accuracy, positive.
    tau : float, optional
        Primal stepsize; defaults to ``0.9 / q``.
    lam_bar0 : ndarray, optional
        Initial auxiliary multiplier. The closed-form counts assume it is
        zero; for a nonzero value the report is rebuilt from the rate bounds
        with the true norm and ``source`` says so.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    q = max_degree(problem)
    if tau is None:
        tau = 0.9 / q
    if not (0.0 < tau and tau * q < 1.0):
        raise ValueError(f"tau must lie in (0, 1/q) with q={q}; got tau={tau}")
    N = problem.N
    DX = diameter(problem)
    G = subgradient_bound(problem)
    smax, smin = singular_values(problem)
    lam_b = dual_bound(problem, G, smin)
    if DX == 0.0:
        raise CertificationError("X is a single point; no penalty to optimize")
    rN = math.sqrt(N)
    nl = 0.0 if lam_bar0 is None else float(np.linalg.norm(lam_bar0))
    if nl == 0.0:
        rho1 = 1.0 / (rN * smax * DX)
        k1 = certified_ceil(rN * smax * DX / (eps * tau))
        rho2 = 2.0 * G / (smin * smax * DX)
        k2 = certified_ceil(2.0 * G * N * smax * DX / (eps * tau * smin))
        source = "a_priori"
        assert math.isclose(rho2, 2.0 * G * rho1 * rN / smin, rel_tol=1e-12, abs_tol=1e-300)
    else:
        a = N * smax ** 2 * DX ** 2
        c1 = (nl + 1.0) ** 2
        rho1 = math.sqrt(c1 / a)
        k1 = certified_ceil(math.sqrt(a * c1) / (eps * tau))
        c2 = max((nl + 2.0 * lam_b) ** 2, 2.0 * ((nl + lam_b) ** 2 + 1.0))
        rho2 = math.sqrt(c2 / a)
        k2 = certified_ceil(math.sqrt(a * c2) / (eps * tau))
        source = "fallback for nonzero lam_bar0"
    return CertificationReport(N, DX, G, smax, smin, q, lam_b, rho1, rho2, k1, k2, float(eps), float(tau),
                               nl, source)
