"""Seeded random instances that are feasible by construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import Ball, Box, ConvexObjective, CouplingBlock, PartitionedProblem, residual

__all__ = ["GeneratorSpec", "generate", "canonical_problem"]


def _draw(rng, v):
    if isinstance(v, (tuple, list)):
        return int(rng.integers(v[0], v[1] + 1))
    return int(v)


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of the random instance family.

    ``N``, ``n`` and ``m`` are either fixed integers or inclusive ranges.
    ``cond`` is the target condition number of each positive definite
    ``Q_i``; a ``singular_fraction`` of agents instead get a rank-deficient
    PSD ``Q_i`` and an ``affine_fraction`` get a linear objective.
    """

    seed: int = 0
    N: tuple | int = (2, 5)
    n: tuple | int = (1, 4)
    m: tuple | int = (1, 6)
    density: float = 0.5
    cond: float = 10.0
    ball_fraction: float = 0.3
    singular_fraction: float = 0.2
    affine_fraction: float = 0.0


def _objective(rng, n, spec):
    u = rng.random()
    q = rng.normal(size=n)
    if u < spec.affine_fraction:
        return ConvexObjective.affine(q)
    V, _ = np.linalg.qr(rng.normal(size=(n, n)))
    ev = np.logspace(0.0, np.log10(spec.cond), n) if n > 1 else np.ones(1)
    ev = ev * rng.uniform(0.5, 2.0)
    if u < spec.affine_fraction + spec.singular_fraction:
        ev[: max(1, n // 2)] = 0.0
    Q = (V * ev) @ V.T
    return ConvexObjective.quadratic(0.5 * (Q + Q.T), q)


def _set_and_point(rng, n, spec):
    center = rng.normal(scale=0.5, size=n)
    if rng.random() < spec.ball_fraction:
        radius = rng.uniform(0.5, 2.0)
        d = rng.normal(size=n)
        d *= radius * rng.uniform(0.0, 0.5) / max(np.linalg.norm(d), 1e-12)
        return Ball(center, radius), center + d
    half = rng.uniform(0.5, 2.0, size=n)
    return Box(center - half, center + half), center + half * rng.uniform(-0.5, 0.5, size=n)


def generate(spec: GeneratorSpec) -> PartitionedProblem:
    """Random problem with every row coupled and ``b = A x_feas`` for an interior ``x_feas``."""
    rng = np.random.default_rng(spec.seed)
    N = _draw(rng, spec.N)
    m = _draw(rng, spec.m)
    dims = [_draw(rng, spec.n) for _ in range(N)]
    objs, sets, pts = [], [], []
    for n in dims:
        objs.append(_objective(rng, n, spec))
        s, x = _set_and_point(rng, n, spec)
        sets.append(s)
        pts.append(x)
    dense = []
    for n in dims:
        mask = rng.random((m, n)) < spec.density
        dense.append(np.where(mask, rng.normal(size=(m, n)), 0.0))
    # every agent couples somewhere, and every row has someone
    for i, n in enumerate(dims):
        if not np.any(dense[i]):
            dense[i][rng.integers(m), rng.integers(n)] = rng.normal()
    for j in range(m):
        if not any(np.any(D[j]) for D in dense):
            i = int(rng.integers(N))
            dense[i][j, rng.integers(dims[i])] = rng.normal()
    blocks = [CouplingBlock.from_dense(i, D) for i, D in enumerate(dense)]
    problem = PartitionedProblem(objs, sets, blocks, np.zeros(m))
    b = residual(problem, problem.stack(pts))
    return PartitionedProblem(objs, sets, blocks, b)


def canonical_problem(lo=-1.0, hi=2.0) -> PartitionedProblem:
    """Two agents, ``f_i = (x_i - 1)^2`` on ``[lo, hi]``, coupled by ``x_1 + x_2 = 1``.

    The saddle point is ``x* = (0.5, 0.5)``, ``lam* = 1``, ``F* = 0.5``.
    """
    objs = [ConvexObjective.quadratic([[2.0]], [-2.0], 1.0) for _ in range(2)]
    sets = [Box([lo], [hi]) for _ in range(2)]
    blocks = [CouplingBlock.from_dense(i, [[1.0]]) for i in range(2)]
    return PartitionedProblem(objs, sets, blocks, [1.0])
