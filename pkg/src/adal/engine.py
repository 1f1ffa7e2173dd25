"""Accelerated Distributed Augmented Lagrangian iterations.

One iteration: every agent minimizes its local AL against the same frozen
snapshot (Jacobi style), primal iterates move a fraction ``tau`` toward the
local minimizers, and the multipliers take a ``rho * tau`` ascent step on the
new residual.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .local_solver import (DEFAULT_TOL, InnerSolverError, assemble_from_messages, shared_rows,
                           solve_with_stats)
from .problem import PartitionedProblem, max_degree, objective_value, residual

__all__ = [
    "AdalConfig",
    "AdalState",
    "IterateTrace",
    "InvariantViolation",
    "initial_state",
    "zero_bar_multiplier",
    "step",
    "check_stop",
    "merit",
    "run",
    "primal_messages_sent",
]

DUAL_IDENTITY_TOL = 1e-9
DESCENT_SLACK = 1e-8
RATE_SLACK = 1e-8
MONOTONE_SLACK = 1e-10


class InvariantViolation(AssertionError):
    """A per-iteration identity or inequality from the convergence analysis failed."""


@dataclass(frozen=True)
class AdalConfig:
    """Parameters of one ADAL run.

    ``tau`` must lie strictly inside ``(0, 1/q)``; use :meth:`for_problem`
    to get the default ``0.9 / q``.
    """

    rho: float
    tau: float
    q: int
    max_iters: int = 1000
    eps: float = 1e-3
    inner_tol: float = DEFAULT_TOL
    stop_tol: float = 1e-8
    stop_on_ergodic: bool = False
    init_dual: str = "zero"
    keep_history: bool = False
    check_invariants: bool = True
    strict: bool = False
    threads: int = 1
    record_time: bool = False

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ValueError(f"rho must be positive and finite, got {self.rho}")
        if self.q < 1:
            raise ValueError(f"max degree q must be >= 1, got {self.q}")
        if not (0.0 < self.tau and self.tau * self.q < 1.0):
            raise ValueError(f"tau must lie in (0, 1/q) with q={self.q}; got tau={self.tau}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.init_dual not in ("zero", "zero_bar"):
            raise ValueError(f"init_dual must be 'zero' or 'zero_bar', got {self.init_dual!r}")

    @classmethod
    def for_problem(cls, problem: PartitionedProblem, rho=1.0, tau=None, **kw) -> "AdalConfig":
        q = max_degree(problem)
        return cls(rho=float(rho), tau=0.9 / q if tau is None else float(tau), q=q, **kw)


@dataclass
class AdalState:
    k: int
    x: np.ndarray
    x_hat: np.ndarray
    lam: np.ndarray
    lam_bar: np.ndarray
    lam_hat: np.ndarray
    ergodic_sum: np.ndarray
    x_prev: np.ndarray | None = None

    def ergodic(self) -> np.ndarray:
        """Ergodic average of the candidate minimizers, ``x_tilde^k``."""
        if self.k == 0:
            return np.full_like(self.x, np.nan)
        return self.ergodic_sum / self.k


@dataclass
class IterateTrace:
    columns: list
    records: list = field(default_factory=list)
    bound_violations: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    stop_reason: str = ""
    final_k: int = 0
    final_gap: float | None = None
    final_residual: float | None = None
    final_ergodic_residual: float | None = None
    wall_time: list = field(default_factory=list)
    history: dict | None = None

    def column(self, name) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.records], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# adal trace rho={self.config.get('rho')!r} tau={self.config.get('tau')!r} "
                  f"inner_tol={self.config.get('inner_tol')!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.records:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "config": self.config,
            "final_k": self.final_k,
            "stop_reason": self.stop_reason,
            "final_gap": self.final_gap,
            "final_residual": self.final_residual,
            "final_ergodic_residual": self.final_ergodic_residual,
            "bound_violations": self.bound_violations,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=1, sort_keys=True) + "\n"


def zero_bar_multiplier(problem: PartitionedProblem, x0, rho: float, tau: float) -> np.ndarray:
    """Initial multiplier making the auxiliary dual ``lam_bar^0`` vanish."""
    return -rho * (1.0 - tau) * residual(problem, x0)


def initial_state(problem: PartitionedProblem, config: AdalConfig, x0=None, lam0=None) -> AdalState:
    x = problem.initial_point() if x0 is None else problem.project(np.asarray(x0, dtype=float))
    if lam0 is None:
        lam = (zero_bar_multiplier(problem, x, config.rho, config.tau) if config.init_dual == "zero_bar"
               else np.zeros(problem.m))
    else:
        lam = np.array(lam0, dtype=float)
    r = residual(problem, x)
    lam_bar = lam + config.rho * (1.0 - config.tau) * r
    return AdalState(0, x, x.copy(), lam, lam_bar, lam + config.rho * r, np.zeros(problem.n), x.copy())


def primal_messages_sent(problem: PartitionedProblem) -> np.ndarray:
    """Scalars each agent sends per iteration: its shared rows, to each co-member."""
    key = "messages_sent"
    if key not in problem._cache:
        sent = np.zeros(problem.N, dtype=int)
        for j in range(problem.N):
            for i in range(problem.N):
                if i != j:
                    sent[j] += shared_rows(problem, i, j)[0].size
        problem._cache[key] = sent
    return problem._cache[key]


def _neighbors(problem, i):
    key = ("neighbors", i)
    if key not in problem._cache:
        problem._cache[key] = [j for j in range(problem.N) if j != i and shared_rows(problem, i, j)[0].size]
    return problem._cache[key]


def _local_solve(problem, i, parts, contribs, lam, config):
    primal = {j: contribs[j][shared_rows(problem, i, j)[2]] for j in _neighbors(problem, i)}
    sub = assemble_from_messages(problem, i, parts[i], primal, lam[problem.support(i)], config.rho)
    return solve_with_stats(sub, config.inner_tol)


def step(problem: PartitionedProblem, state: AdalState, config: AdalConfig, executor=None):
    """One ADAL iteration from ``state``.

    Returns
    -------
    new_state : AdalState
    inner_iterations : int
        Total inner-solver iterations across agents.
    """
    parts = problem.split(state.x)
    contribs = [problem.contribution(j, parts[j]) for j in range(problem.N)]

    def solve(i):
        try:
            return _local_solve(problem, i, parts, contribs, state.lam, config)
        except InnerSolverError as exc:
            exc.agent, exc.iteration = i, state.k
            raise

    if executor is None:
        results = [solve(i) for i in range(problem.N)]
    else:
        results = list(executor.map(solve, range(problem.N)))
    x_hat = problem.stack([r.x for r in results])
    tau, rho = config.tau, config.rho
    x_next = state.x + tau * (x_hat - state.x)
    r_next = residual(problem, x_next)
    r_hat = residual(problem, x_hat)
    lam_next = state.lam + rho * tau * r_next
    new = AdalState(
        k=state.k + 1,
        x=x_next,
        x_hat=x_hat,
        lam=lam_next,
        lam_bar=lam_next + rho * (1.0 - tau) * r_next,
        lam_hat=state.lam + rho * r_hat,
        ergodic_sum=state.ergodic_sum + x_hat,
        x_prev=state.x,
    )
    return new, sum(r.iterations for r in results)


def check_stop(problem: PartitionedProblem, state: AdalState, stop_tol: float) -> bool:
    """True iff ``||r(x^{k+1})||_inf`` and every ``||A_i(x_hat_i^k - x_i^k)||_inf`` are within ``stop_tol``."""
    if not np.isfinite(stop_tol):
        return True
    if np.max(np.abs(residual(problem, state.x)), initial=0.0) > stop_tol:
        return False
    x_prev = state.x if state.x_prev is None else state.x_prev
    hp, xp = problem.split(state.x_hat), problem.split(x_prev)
    for i in range(problem.N):
        if np.max(np.abs(problem.contribution(i, hp[i] - xp[i])), initial=0.0) > stop_tol:
            return False
    return True


def _primal_distance(problem, x, x_star) -> float:
    total = 0.0
    for i, (xi, si) in enumerate(zip(problem.split(x), problem.split(x_star))):
        d = problem.contribution(i, xi - si)
        total += float(d @ d)
    return total


def merit(problem: PartitionedProblem, state: AdalState, lam_probe, x_star, rho: float) -> float:
    """``rho sum_i ||A_i(x_i - x_i*)||^2 + ||lam_bar - lam_probe||^2 / rho``."""
    lam_probe = np.asarray(lam_probe, dtype=float)
    if lam_probe.shape != (problem.m,):
        raise ValueError(f"probe has shape {lam_probe.shape}, expected ({problem.m},)")
    d = state.lam_bar - lam_probe
    return rho * _primal_distance(problem, state.x, x_star) + float(d @ d) / rho


class _Bounds:
    """Right-hand sides of the ergodic rate bounds, fixed at run start."""

    def __init__(self, problem, state0, config, oracle):
        rho = config.rho
        self.F_star = float(oracle.F_star)
        self.lam_star = np.asarray(oracle.lambda_star, dtype=float)
        self.x_star = np.asarray(oracle.x_star, dtype=float)
        prim = rho * _primal_distance(problem, state0.x, self.x_star)
        lb0 = state0.lam_bar
        nlb0 = float(np.linalg.norm(lb0))
        self.thm1 = prim + (nlb0 + 1.0) ** 2 / rho
        phi0_zero = prim + float(lb0 @ lb0) / rho
        d2 = lb0 - 2.0 * self.lam_star
        phi0_two = prim + float(d2 @ d2) / rho
        self.thm2a = max(phi0_zero, phi0_two)
        d = lb0 - self.lam_star
        self.thm2b = prim + 2.0 / rho * (float(d @ d) + 1.0)
        # labelled separately: only a valid bound when lam_bar^0 = 0
        self.ubnd2 = prim + 4.0 / rho * float(self.lam_star @ self.lam_star)


def _columns(n_probes, N, with_oracle):
    cols = ["k", "F_ergodic", "res_ergodic", "res_primal"]
    if with_oracle:
        cols += [f"phi_{p}" for p in range(n_probes)]
        cols += ["phi_star", "gap_lhs", "gap_rhs", "obj_lhs", "obj_rhs", "res_lhs", "res_rhs",
                 "lam_star_rhs"]
    cols += ["inner_iters"] + [f"msgs_sent_{i}" for i in range(N)]
    return cols


def run(problem: PartitionedProblem, config: AdalConfig, probes: Sequence = (), oracle=None,
        x0=None, lam0=None, executor=None):
    """Iterate until the exact-stop test passes or the budget is spent.

    Parameters
    ----------
    problem : PartitionedProblem
    config : AdalConfig
    probes : sequence of ndarray
        Multipliers at which the merit function is traced (needs ``oracle``).
    oracle : SaddlePoint, optional
        Reference ``(x*, lam*, F*)``. When present the trace carries the merit
        values and the ergodic rate bounds, and every per-iteration inequality
        is checked.
    x0, lam0 : ndarray, optional
        Initial primal (projected onto X) and multiplier.
    executor : concurrent.futures.Executor, optional
        Runs the local solves; ``config.threads > 1`` creates a thread pool.

    Returns
    -------
    state : AdalState
    trace : IterateTrace
    """
    own_pool = None
    if executor is None and config.threads > 1:
        executor = own_pool = ThreadPoolExecutor(max_workers=config.threads)
    try:
        return _run(problem, config, [np.asarray(p, dtype=float) for p in probes], oracle, x0, lam0, executor)
    finally:
        if own_pool is not None:
            own_pool.shutdown()


def _violation(trace, config, k, check, lhs, rhs):
    trace.bound_violations.append({"k": int(k), "check": check, "lhs": float(lhs), "rhs": float(rhs)})
    if config.strict:
        raise InvariantViolation(f"{check} violated at k={k}: {lhs!r} > {rhs!r}")


def _run(problem, config, probes, oracle, x0, lam0, executor):
    with_oracle = oracle is not None
    state = initial_state(problem, config, x0, lam0)
    sent = primal_messages_sent(problem)
    cfg = asdict(config)
    trace = IterateTrace(columns=_columns(len(probes), problem.N, with_oracle), config=cfg)
    if config.keep_history:
        trace.history = {"x": [state.x], "x_hat": [], "lam": [state.lam], "lam_bar": [state.lam_bar]}
    bounds = _Bounds(problem, state, config, oracle) if with_oracle else None
    rho, tau = config.rho, config.tau
    t0 = time.perf_counter()

    def phis(st):
        prim = rho * _primal_distance(problem, st.x, bounds.x_star)
        out = []
        for p in list(probes) + [bounds.lam_star]:
            d = st.lam_bar - p
            out.append(prim + float(d @ d) / rho)
        return out

    def record(st, inner, phi_vals):
        k = st.k
        xt = st.ergodic()
        if k == 0:
            F_erg, r_erg = math.nan, math.nan
        else:
            F_erg = objective_value(problem, xt)
            r_erg = float(np.linalg.norm(residual(problem, xt)))
        row = [k, F_erg, r_erg, float(np.linalg.norm(residual(problem, st.x)))]
        if with_oracle:
            row += phi_vals
            if k == 0:
                row += [math.nan] * 7
            else:
                gap = F_erg - bounds.F_star
                c = 1.0 / (2.0 * k * tau)
                row += [gap + r_erg, c * bounds.thm1, abs(gap), c * bounds.thm2a, r_erg, c * bounds.thm2b,
                        c * bounds.ubnd2]
                if config.check_invariants:
                    if gap + r_erg > c * bounds.thm1 + RATE_SLACK:
                        _violation(trace, config, k, "rate_gap", gap + r_erg, c * bounds.thm1)
                    if abs(gap) > c * bounds.thm2a + RATE_SLACK:
                        _violation(trace, config, k, "rate_objective", abs(gap), c * bounds.thm2a)
                    if r_erg > c * bounds.thm2b + RATE_SLACK:
                        _violation(trace, config, k, "rate_residual", r_erg, c * bounds.thm2b)
        row += [int(inner)] + [int(s) if k > 0 else 0 for s in sent]
        trace.records.append(row)
        if config.record_time:
            trace.wall_time.append(time.perf_counter() - t0)

    phi_prev = phis(state) if with_oracle else []
    record(state, 0, phi_prev)
    trace.stop_reason = "max_iters"
    while True:
        prev = state
        try:
            state, inner = step(problem, prev, config, executor)
        except InnerSolverError as exc:
            exc.trace = trace
            exc.state = prev
            trace.stop_reason = "inner_solver_failed"
            trace.final_k = prev.k
            raise
        if config.check_invariants:
            r_hat = residual(problem, state.x_hat)
            ident = float(np.linalg.norm(state.lam_bar - (prev.lam_bar + tau * rho * r_hat)))
            if ident > DUAL_IDENTITY_TOL:
                _violation(trace, config, state.k, "dual_identity", ident, DUAL_IDENTITY_TOL)
            if not all(s.contains(xi, 1e-12) for s, xi in zip(problem.sets, problem.split(state.x))):
                _violation(trace, config, state.k, "primal_in_X", 1.0, 0.0)
        phi_new = phis(state) if with_oracle else []
        if with_oracle and config.check_invariants:
            F_hat = objective_value(problem, state.x_hat)
            r_hat = residual(problem, state.x_hat)
            for p, lam_p in enumerate(list(probes) + [bounds.lam_star]):
                lhs = F_hat - bounds.F_star + float(lam_p @ r_hat)
                rhs = (phi_prev[p] - phi_new[p]) / (2.0 * tau)
                if lhs > rhs + DESCENT_SLACK * (1.0 + abs(phi_prev[p])):
                    _violation(trace, config, prev.k, f"descent[{p}]", lhs, rhs)
            if phi_new[-1] > phi_prev[-1] + MONOTONE_SLACK:
                _violation(trace, config, state.k, "merit_monotone", phi_new[-1], phi_prev[-1])
        if trace.history is not None:
            h = trace.history
            h["x"].append(state.x)
            h["x_hat"].append(state.x_hat)
            h["lam"].append(state.lam)
            h["lam_bar"].append(state.lam_bar)
        if check_stop(problem, state, config.stop_tol):
            trace.stop_reason = "converged"
            break
        record(state, inner, phi_new)
        phi_prev = phi_new
        if config.stop_on_ergodic and trace.records[-1][2] <= config.eps:
            trace.stop_reason = "eps_reached"
            break
        if state.k >= config.max_iters:
            break
    trace.final_k = state.k
    xt = state.ergodic()
    trace.final_residual = float(np.linalg.norm(residual(problem, state.x)))
    trace.final_ergodic_residual = float(np.linalg.norm(residual(problem, xt)))
    if with_oracle:
        trace.final_gap = objective_value(problem, xt) - bounds.F_star + trace.final_ergodic_residual
    return state, trace


def replace_config(config: AdalConfig, **kw) -> AdalConfig:
    return replace(config, **kw)
