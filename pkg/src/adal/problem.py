"""Partitioned convex programs with linear coupling.

A problem couples ``N`` agents through ``sum_i A_i x_i = b``; each agent owns a
convex quadratic (or affine) objective and a bounded local set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ConvexObjective",
    "Box",
    "Ball",
    "ProductSet",
    "CouplingBlock",
    "PartitionedProblem",
    "ValidationReport",
    "validate",
    "prepare",
    "max_degree",
    "row_degrees",
    "residual",
    "objective_value",
    "objective_subgradient",
]

_SYM_RTOL = 1e-12
_PSD_RTOL = 1e-10


def _vec(v, n=None, name="vector"):
    a = np.array(v, dtype=float).reshape(-1)
    if n is not None and a.shape[0] != n:
        raise ValueError(f"{name} has length {a.shape[0]}, expected {n}")
    return a


@dataclass(frozen=True, eq=False)
class ConvexObjective:
    """``f(x) = 0.5 x'Qx + q'x + c`` (quadratic) or ``g'x + c`` (affine).

    For the affine kind ``Q`` is ``None`` and ``q`` holds the constant
    gradient ``g``.
    """

    kind: str
    q: np.ndarray
    c: float = 0.0
    Q: np.ndarray | None = None

    @classmethod
    def quadratic(cls, Q, q=None, c=0.0):
        Q = np.atleast_2d(np.array(Q, dtype=float))
        n = Q.shape[0]
        q = np.zeros(n) if q is None else _vec(q, n, "q")
        return cls("quadratic", q, float(c), Q)

    @classmethod
    def affine(cls, g, c=0.0):
        return cls("affine", _vec(g), float(c), None)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def hessian(self) -> np.ndarray:
        if self.Q is None:
            return np.zeros((self.n, self.n))
        return self.Q

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        v = float(self.q @ x) + self.c
        if self.Q is not None:
            v += 0.5 * float(x @ (self.Q @ x))
        return v

    def gradient(self, x) -> np.ndarray:
        """Exact gradient; the only subgradient for this smooth catalog."""
        if self.Q is None:
            return self.q.copy()
        return self.Q @ np.asarray(x, dtype=float) + self.q

    def check(self) -> list[str]:
        out = []
        if not np.all(np.isfinite(self.q)) or not np.isfinite(self.c):
            out.append("non-finite objective coefficients")
        if self.kind not in ("quadratic", "affine"):
            out.append(f"unknown objective kind {self.kind!r}")
        if self.Q is None:
            return out
        Q = self.Q
        if Q.shape != (self.n, self.n):
            out.append(f"Q has shape {Q.shape}, expected {(self.n, self.n)}")
            return out
        if not np.all(np.isfinite(Q)):
            out.append("non-finite Q")
            return out
        scale = max(np.abs(Q).max(), 1.0) if Q.size else 1.0
        if np.abs(Q - Q.T).max(initial=0.0) > _SYM_RTOL * scale:
            out.append("Q not symmetric")
            return out
        if Q.size and np.linalg.eigvalsh(Q).min() < -_PSD_RTOL * np.linalg.norm(Q, 2):
            out.append("Q not positive semidefinite")
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "q": self.q.tolist(), "c": self.c}
        if self.Q is not None:
            d["Q"] = self.Q.reshape(-1).tolist()
        return d


class _SetBase:
    """Shared behaviour of the supported local sets."""

    dim: int

    def project(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diameter(self) -> float:
        raise NotImplementedError

    def contains(self, v, tol=0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.linalg.norm(v - self.project(v)) <= tol)

    def center_point(self) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Box(_SetBase):
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _vec(self.lo))
        object.__setattr__(self, "hi", _vec(self.hi))

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def project(self, v):
        return np.minimum(np.maximum(np.asarray(v, dtype=float), self.lo), self.hi)

    def diameter(self):
        return float(np.linalg.norm(self.hi - self.lo))

    def center_point(self):
        return 0.5 * (self.lo + self.hi)

    def check(self) -> list[str]:
        out = []
        if self.hi.shape != self.lo.shape:
            out.append("box bounds differ in length")
            return out
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            out.append("unbounded set")
        if np.any(self.lo > self.hi):
            out.append("empty local set")
        return out

    def to_dict(self):
        return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True, eq=False)
class Ball(_SetBase):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def project(self, v):
        v = np.asarray(v, dtype=float)
        d = v - self.center
        nd = np.linalg.norm(d)
        if nd <= self.radius:
            return v.copy()
        # shrink by ulps until rounding lands inside, so projection is idempotent
        s = self.radius / nd
        y = self.center + d * s
        while np.linalg.norm(y - self.center) > self.radius:
            s = np.nextafter(s, 0.0) * (1.0 - 2.0 ** -52)
            y = self.center + d * s
        return y

    def diameter(self):
        return 2.0 * self.radius

    def center_point(self):
        return self.center.copy()

    def check(self) -> list[str]:
        out = []
        if not np.all(np.isfinite(self.center)) or not np.isfinite(self.radius):
            out.append("unbounded set")
        if not self.radius > 0:
            out.append("ball radius must be positive")
        return out

    def to_dict(self):
        return {"kind": "ball", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True, eq=False)
class ProductSet(_SetBase):
    """Cartesian product of boxes and balls over consecutive coordinate blocks."""

    factors: tuple

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))

    @property
    def dim(self) -> int:
        return sum(f.dim for f in self.factors)

    def slices(self):
        start = 0
        for f in self.factors:
            yield slice(start, start + f.dim), f
            start += f.dim

    def project(self, v):
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        for sl, f in self.slices():
            out[sl] = f.project(v[sl])
        return out

    def diameter(self):
        return float(np.sqrt(sum(f.diameter() ** 2 for f in self.factors)))

    def center_point(self):
        return np.concatenate([f.center_point() for f in self.factors])

    def check(self) -> list[str]:
        out = []
        for f in self.factors:
            if isinstance(f, ProductSet):
                out.append("nested product sets are not supported")
            else:
                out.extend(f.check())
        return out

    def to_dict(self):
        return {"kind": "product", "factors": [f.to_dict() for f in self.factors]}


def product_of(sets: Sequence) -> Box | ProductSet:
    """Flatten a sequence of sets into one box when possible."""
    flat = []
    for s in sets:
        flat.extend(s.factors if isinstance(s, ProductSet) else [s])
    if all(isinstance(s, Box) for s in flat):
        return Box(np.concatenate([s.lo for s in flat]), np.concatenate([s.hi for s in flat]))
    merged = []
    for s in flat:
        if merged and isinstance(s, Box) and isinstance(merged[-1], Box):
            prev = merged.pop()
            s = Box(np.concatenate([prev.lo, s.lo]), np.concatenate([prev.hi, s.hi]))
        merged.append(s)
    return ProductSet(tuple(merged))


@dataclass(frozen=True, eq=False)
class CouplingBlock:
    """Sparse ``m x n`` block ``A_i`` in canonical sorted-triplet form.

    Duplicate ``(row, col)`` entries are summed and explicit zeros dropped on
    construction, so ``support`` is exactly the set of nonzero rows.
    """

    agent: int
    m: int
    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    @classmethod
    def from_triplets(cls, agent, m, n, triplets):
        t = list(triplets)
        if t:
            arr = np.array(t, dtype=float).reshape(-1, 3)
            rows, cols, vals = arr[:, 0], arr[:, 1], arr[:, 2]
        else:
            rows = cols = vals = np.zeros(0)
        return cls.from_arrays(agent, m, n, rows, cols, vals)

    @classmethod
    def from_arrays(cls, agent, m, n, rows, cols, vals):
        rows = np.asarray(rows, dtype=float)
        cols = np.asarray(cols, dtype=float)
        vals = np.asarray(vals, dtype=float)
        if rows.size and (np.any(rows != np.round(rows)) or np.any(cols != np.round(cols))):
            raise ValueError(f"agent {agent}: non-integer triplet index")
        rows = rows.astype(np.int64)
        cols = cols.astype(np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= m):
            raise ValueError(f"agent {agent}: row index out of range [0, {m})")
        if cols.size and (cols.min() < 0 or cols.max() >= n):
            raise ValueError(f"agent {agent}: column index out of range [0, {n})")
        key = rows * n + cols
        order = np.argsort(key, kind="stable")
        key, vals = key[order], vals[order]
        uniq, start = np.unique(key, return_index=True)
        summed = np.add.reduceat(vals, start) if vals.size else vals
        keep = summed != 0.0
        uniq, summed = uniq[keep], summed[keep]
        return cls(int(agent), int(m), int(n), uniq // n, uniq % n, summed)

    @classmethod
    def from_dense(cls, agent, D):
        D = np.atleast_2d(np.asarray(D, dtype=float))
        r, c = np.nonzero(D)
        return cls.from_arrays(agent, D.shape[0], D.shape[1], r, c, D[r, c])

    @property
    def support(self) -> np.ndarray:
        """Sorted indices of nonzero rows (the row set Q_i)."""
        return np.unique(self.rows)

    def local_dense(self) -> np.ndarray:
        """Dense ``|Q_i| x n`` block restricted to the nonzero rows."""
        sup = self.support
        D = np.zeros((sup.shape[0], self.n))
        D[np.searchsorted(sup, self.rows), self.cols] = self.vals
        return D

    def dense(self) -> np.ndarray:
        D = np.zeros((self.m, self.n))
        D[self.rows, self.cols] = self.vals
        return D

    def triplets(self) -> list:
        return [[int(r), int(c), float(v)] for r, c, v in zip(self.rows, self.cols, self.vals)]


@dataclass(eq=False)
class PartitionedProblem:
    """``min sum_i f_i(x_i)  s.t.  sum_i A_i x_i = b,  x_i in X_i``.

    Instances are treated as immutable once built; derived data (dense local
    blocks, offsets) is cached lazily and is safe to share across threads.
    """

    objectives: list
    sets: list
    couplings: list
    b: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.b = _vec(self.b)
        self.objectives = list(self.objectives)
        self.sets = list(self.sets)
        self.couplings = list(self.couplings)

    @property
    def N(self) -> int:
        return len(self.objectives)

    @property
    def m(self) -> int:
        return self.b.shape[0]

    @property
    def dims(self) -> list[int]:
        return [f.n for f in self.objectives]

    @property
    def n(self) -> int:
        return sum(self.dims)

    def offsets(self) -> np.ndarray:
        if "offsets" not in self._cache:
            self._cache["offsets"] = np.concatenate([[0], np.cumsum(self.dims)]).astype(int)
        return self._cache["offsets"]

    def split(self, x) -> list[np.ndarray]:
        """Stacked vector -> per-agent views."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"stacked vector has shape {x.shape}, expected ({self.n},)")
        off = self.offsets()
        return [x[off[i]:off[i + 1]] for i in range(self.N)]

    def stack(self, parts) -> np.ndarray:
        return np.concatenate([np.asarray(p, dtype=float).reshape(-1) for p in parts]) if parts else np.zeros(0)

    def support(self, i: int) -> np.ndarray:
        key = ("support", i)
        if key not in self._cache:
            self._cache[key] = self.couplings[i].support
        return self._cache[key]

    def local_block(self, i: int) -> np.ndarray:
        key = ("local_block", i)
        if key not in self._cache:
            self._cache[key] = self.couplings[i].local_dense()
        return self._cache[key]

    def contribution(self, i: int, xi) -> np.ndarray:
        """``[A_i x_i]_l`` for ``l`` in the support of agent ``i``."""
        return self.local_block(i) @ np.asarray(xi, dtype=float)

    def dense_A(self) -> np.ndarray:
        return np.hstack([c.dense() for c in self.couplings]) if self.couplings else np.zeros((self.m, 0))

    def project(self, x) -> np.ndarray:
        return self.stack([s.project(xi) for s, xi in zip(self.sets, self.split(x))])

    def initial_point(self) -> np.ndarray:
        """Projection of the origin onto ``X``."""
        return self.project(np.zeros(self.n))

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "agents": [
                {"n": f.n, "objective": f.to_dict(), "set": s.to_dict(),
                 "A": {"rows": self.m, "triplets": c.triplets()}}
                for f, s, c in zip(self.objectives, self.sets, self.couplings)
            ],
            "b": self.b.tolist(),
        }


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    vacuous_rows: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def validate(problem: PartitionedProblem) -> ValidationReport:
    """Check the structural preconditions of a partitioned problem.

    Never raises; every failure is collected in the returned report.
    """
    rep = ValidationReport()
    N = problem.N
    if not (len(problem.sets) == N and len(problem.couplings) == N):
        rep.violations.append(
            f"dimension mismatch: {N} objectives, {len(problem.sets)} sets, "
            f"{len(problem.couplings)} coupling blocks")
        return rep
    if N == 0:
        rep.violations.append("problem has no agents")
        return rep
    if not np.all(np.isfinite(problem.b)):
        rep.violations.append("non-finite b")
    for i, (f, s, c) in enumerate(zip(problem.objectives, problem.sets, problem.couplings)):
        rep.violations.extend(f"agent {i}: {msg}" for msg in f.check())
        if s.dim != f.n:
            rep.violations.append(f"agent {i}: dimension mismatch, set has {s.dim} coordinates, objective {f.n}")
        else:
            rep.violations.extend(f"agent {i}: {msg}" for msg in s.check())
        if c.m != problem.m or c.n != f.n:
            rep.violations.append(
                f"agent {i}: dimension mismatch, coupling block is {c.m}x{c.n}, expected {problem.m}x{f.n}")
        if c.agent != i:
            rep.violations.append(f"agent {i}: coupling block labelled for agent {c.agent}")
        if not np.all(np.isfinite(c.vals)):
            rep.violations.append(f"agent {i}: non-finite coupling entries")
    if rep.violations:
        return rep
    deg = row_degrees(problem)
    for j in np.flatnonzero(deg == 0):
        if problem.b[j] != 0.0:
            rep.violations.append(f"vacuous infeasible row {j}: no agent couples, b={problem.b[j]}")
        else:
            rep.vacuous_rows.append(int(j))
            rep.warnings.append(f"row {j} couples no agent and will be pruned")
    return rep


def prune_rows(problem: PartitionedProblem, drop: Sequence[int]) -> PartitionedProblem:
    """Return a copy with the given constraint rows removed."""
    keep = np.setdiff1d(np.arange(problem.m), np.asarray(drop, dtype=int))
    remap = -np.ones(problem.m, dtype=int)
    remap[keep] = np.arange(keep.size)
    blocks = []
    for c in problem.couplings:
        mask = remap[c.rows] >= 0
        blocks.append(CouplingBlock.from_arrays(c.agent, keep.size, c.n, remap[c.rows[mask]],
                                                c.cols[mask], c.vals[mask]))
    return PartitionedProblem(problem.objectives, problem.sets, blocks, problem.b[keep])


def prepare(problem: PartitionedProblem) -> PartitionedProblem:
    """Validate, raise on violations, and prune vacuous zero rows."""
    rep = validate(problem)
    if not rep.ok:
        raise ValueError("invalid problem: " + "; ".join(rep.violations))
    if rep.vacuous_rows:
        for w in rep.warnings:
            warnings.warn(w, stacklevel=2)
        return prune_rows(problem, rep.vacuous_rows)
    return problem


def row_degrees(problem: PartitionedProblem) -> np.ndarray:
    """Per-row count ``q_j`` of agents with a nonzero block row."""
    deg = np.zeros(problem.m, dtype=int)
    for c in problem.couplings:
        deg[c.support] += 1
    return deg


def max_degree(problem: PartitionedProblem) -> int:
    deg = row_degrees(problem)
    if deg.size == 0:
        raise ValueError("problem has no coupling rows")
    if np.any(deg == 0):
        raise ValueError(f"rows {np.flatnonzero(deg == 0).tolist()} couple no agent; prune them first")
    return int(deg.max())


def residual(problem: PartitionedProblem, x) -> np.ndarray:
    """``r(x) = sum_i A_i x_i - b``, summed in ascending agent order."""
    acc = np.zeros(problem.m)
    for i, xi in enumerate(problem.split(x)):
        acc[problem.support(i)] += problem.contribution(i, xi)
    return acc - problem.b


def objective_value(problem: PartitionedProblem, x) -> float:
    total = 0.0
    for f, xi in zip(problem.objectives, problem.split(x)):
        total += f.value(xi)
    return total


def objective_subgradient(problem: PartitionedProblem, i: int, xi) -> np.ndarray:
    xi = _vec(xi, problem.dims[i], "x_i")
    return problem.objectives[i].gradient(xi)
