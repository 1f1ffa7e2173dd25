import numpy as np

from adal.problem import Ball, Box, ConvexObjective, CouplingBlock, PartitionedProblem


def problem_from_dense(Qs, qs, sets, A_blocks, b):
    objs = [ConvexObjective.quadratic(Q, q) for Q, q in zip(Qs, qs)]
    blocks = [CouplingBlock.from_dense(i, D) for i, D in enumerate(A_blocks)]
    return PartitionedProblem(objs, sets, blocks, b)


def merit_value(problem, x, lam_bar, lam, x_star, rho):
    """Merit function recomputed from raw arrays (no engine code)."""
    A = problem.dense_A()
    total = 0.0
    off = problem.offsets()
    for i in range(problem.N):
        sl = slice(off[i], off[i + 1])
        d = A[:, sl] @ (x[sl] - x_star[sl])
        total += d @ d
    e = lam_bar - lam
    return rho * total + (e @ e) / rho


def dense_residual(problem, x):
    return problem.dense_A() @ x - problem.b


def dual_bound_counterexample():
    """One agent on the unit square, minimize -x1 subject to x1 + x2 = 0.5.

    x1 is interior at the optimum, so the multiplier is exactly 1, while the
    bound sqrt(N) G / sigma_min gives 1/sqrt(2).
    """
    obj = ConvexObjective.affine([-1.0, 0.0])
    return PartitionedProblem([obj], [Box([0.0, 0.0], [1.0, 1.0])],
                              [CouplingBlock.from_dense(0, [[1.0, 1.0]])], [0.5])


def random_box(rng, n):
    lo = rng.uniform(-2.0, 0.0, size=n)
    return Box(lo, lo + rng.uniform(0.5, 3.0, size=n))


def random_ball(rng, n):
    return Ball(rng.normal(scale=0.5, size=n), rng.uniform(0.5, 2.0))


def random_pd(rng, n, cond=20.0):
    V, _ = np.linalg.qr(rng.normal(size=(n, n)))
    ev = np.logspace(0, np.log10(cond), n)
    return (V * ev) @ V.T
