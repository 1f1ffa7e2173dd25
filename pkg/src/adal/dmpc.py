"""Distributed MPC for coupled linear subsystems.

Subsystem ``i`` evolves as ``x_i^{t+1} = sum_j A_ij^t x_j^t + B_ij^t u_j^t``.
The finite-horizon problem over ``t = 1..H`` is compiled into a
:class:`~adal.problem.PartitionedProblem` whose agents are the subsystems and
whose coupling rows are the dynamics equalities. Times are 1-based, as in the
usual MPC notation; agent indices are 0-based.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag

from .certification import certify
from .engine import AdalConfig, run
from .io import ProblemFormatError, _fields, set_from_dict
from .local_solver import assemble
from .oracle import solve_centralized
from .problem import (Box, ConvexObjective, CouplingBlock, PartitionedProblem, max_degree, objective_value,
                      product_of, residual)

__all__ = [
    "StageCost",
    "TerminalCost",
    "CoupledDynamics",
    "MpcInstance",
    "MpcLayout",
    "compile_mpc",
    "two_hop_neighborhood",
    "dynamics_violation",
    "local_al_blocks",
    "blocks_al_offset",
    "ControllerConfig",
    "ClosedLoopTrace",
    "receding_horizon",
    "oracle_closed_loop",
    "load_mpc",
    "mpc_from_dict",
    "coupled_double_integrators",
    "local_al_generic",
]


@dataclass
class StageCost:
    """``0.5 x'Qx + 0.5 u'Ru + q'x + r'u``."""

    Q: np.ndarray
    R: np.ndarray
    q: np.ndarray | None = None
    r: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.q = np.zeros(self.Q.shape[0]) if self.q is None else np.asarray(self.q, dtype=float)
        self.r = np.zeros(self.R.shape[0]) if self.r is None else np.asarray(self.r, dtype=float)

    def state_value(self, x) -> float:
        return 0.5 * float(x @ self.Q @ x) + float(self.q @ x)

    def input_value(self, u) -> float:
        return 0.5 * float(u @ self.R @ u) + float(self.r @ u)


@dataclass
class TerminalCost:
    P: np.ndarray
    q: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.zeros(self.P.shape[0]) if self.q is None else np.asarray(self.q, dtype=float)

    def value(self, x) -> float:
        return 0.5 * float(x @ self.P @ x) + float(self.q @ x)


@dataclass
class CoupledDynamics:
    """Blocks ``A_ij^t`` (``n_i x n_j``) and ``B_ij^t`` (``n_i x p_j``) for ``t = 1..H-1``.

    Missing blocks are zero. Self-loop blocks are always stored.
    """

    n: list
    p: list
    H: int
    A: dict = field(default_factory=dict)
    B: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.H < 2:
            raise ValueError("horizon H must be at least 2")
        for t in range(1, self.H):
            for i in range(self.N):
                self.A.setdefault((t, i, i), np.zeros((self.n[i], self.n[i])))
                self.B.setdefault((t, i, i), np.zeros((self.n[i], self.p[i])))
        for (t, i, j), M in list(self.A.items()):
            self.A[(t, i, j)] = np.asarray(M, dtype=float).reshape(self.n[i], self.n[j])
        for (t, i, j), M in list(self.B.items()):
            self.B[(t, i, j)] = np.asarray(M, dtype=float).reshape(self.n[i], self.p[j])
        self._in = {}
        for t in range(1, self.H):
            for i in range(self.N):
                self._in[(t, i)] = sorted(j for j in range(self.N) if self.coupled(t, i, j))

    @classmethod
    def time_invariant(cls, n, p, H, A_blocks, B_blocks):
        """Same ``A_ij``, ``B_ij`` (keyed by ``(i, j)``) at every time."""
        A = {(t, i, j): M for t in range(1, H) for (i, j), M in A_blocks.items()}
        B = {(t, i, j): M for t in range(1, H) for (i, j), M in B_blocks.items()}
        return cls(list(n), list(p), H, A, B)

    @property
    def N(self) -> int:
        return len(self.n)

    def a(self, t, i, j) -> np.ndarray:
        M = self.A.get((t, i, j))
        return np.zeros((self.n[i], self.n[j])) if M is None else M

    def b(self, t, i, j) -> np.ndarray:
        M = self.B.get((t, i, j))
        return np.zeros((self.n[i], self.p[j])) if M is None else M

    def coupled(self, t, i, j) -> bool:
        """Edge ``j -> i`` at time ``t``."""
        return bool(np.any(self.a(t, i, j)) or np.any(self.b(t, i, j)))

    def in_neighbors(self, i, t) -> list:
        return self._in[(t, i)]

    def out_neighbors(self, i, t) -> list:
        return [j for j in range(self.N) if i in self._in[(t, j)]]

    def edges(self, t) -> list:
        return [(j, i) for i in range(self.N) for j in self._in[(t, i)]]

    def propagate(self, t, xs, us) -> list:
        """Next states of every subsystem from states ``xs`` and inputs ``us`` at time ``t``."""
        out = []
        for i in range(self.N):
            acc = np.zeros(self.n[i])
            for j in self._in[(t, i)]:
                acc = acc + self.a(t, i, j) @ xs[j] + self.b(t, i, j) @ us[j]
            out.append(acc)
        return out

    def shifted(self, s: int) -> "CoupledDynamics":
        """Dynamics re-indexed to start ``s`` steps later; the last blocks repeat."""
        if s == 0:
            return self
        A, B = {}, {}
        for t in range(1, self.H):
            src = min(t + s, self.H - 1)
            for i in range(self.N):
                for j in range(self.N):
                    if (src, i, j) in self.A:
                        A[(t, i, j)] = self.A[(src, i, j)]
                    if (src, i, j) in self.B:
                        B[(t, i, j)] = self.B[(src, i, j)]
        return CoupledDynamics(self.n, self.p, self.H, A, B)


def _per_time(v, count, what):
    if isinstance(v, (list, tuple)):
        if len(v) != count:
            raise ValueError(f"{what}: expected {count} entries, got {len(v)}")
        return list(v)
    return [v] * count


@dataclass
class MpcInstance:
    """Finite-horizon problem parametric in the initial state ``x_init``.

    ``stage_costs[i]`` is one :class:`StageCost` or a list for ``t = 1..H-1``;
    ``state_sets[i]`` is one set or a list for ``t = 2..H``; ``input_sets[i]``
    is one set or a list for ``t = 1..H-1``.
    """

    dynamics: CoupledDynamics
    stage_costs: list
    terminal_costs: list
    state_sets: list
    input_sets: list
    x_init: list

    def __post_init__(self):
        dyn = self.dynamics
        self.x_init = [np.asarray(x, dtype=float).reshape(dyn.n[i]) for i, x in enumerate(self.x_init)]
        for name in ("stage_costs", "terminal_costs", "state_sets", "input_sets"):
            if len(getattr(self, name)) != dyn.N:
                raise ValueError(f"{name}: expected {dyn.N} subsystems")

    @property
    def N(self) -> int:
        return self.dynamics.N

    @property
    def H(self) -> int:
        return self.dynamics.H

    def stage(self, i, t) -> StageCost:
        return _per_time(self.stage_costs[i], self.H - 1, "stage_costs")[t - 1]

    def state_set(self, i, t):
        return _per_time(self.state_sets[i], self.H - 1, "state_sets")[t - 2]

    def input_set(self, i, t):
        return _per_time(self.input_sets[i], self.H - 1, "input_sets")[t - 1]

    def with_initial_state(self, x_init) -> "MpcInstance":
        return MpcInstance(self.dynamics, self.stage_costs, self.terminal_costs, self.state_sets,
                           self.input_sets, list(x_init))

    def validate(self) -> list:
        out = []
        for i in range(self.N):
            for t in range(1, self.H):
                s = self.stage(i, t)
                for name, M in (("Q", s.Q), ("R", s.R)):
                    if np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -1e-10 * max(np.linalg.norm(M, 2), 1.0):
                        out.append(f"subsystem {i}: stage cost {name} at t={t} not PSD")
            P = self.terminal_costs[i].P
            if np.linalg.eigvalsh(0.5 * (P + P.T)).min() < -1e-10 * max(np.linalg.norm(P, 2), 1.0):
                out.append(f"subsystem {i}: terminal cost not PSD")
        return out


class MpcLayout:
    """Index bookkeeping between ``(subsystem, time)`` blocks and the compiled problem.

    Agent ``i`` stacks ``(x_i^2, ..., x_i^H, u_i^1, ..., u_i^{H-1})``; the rows
    of ``x_i^{t+1} = ...`` form block ``(i, t)`` in subsystem-major order.
    """

    def __init__(self, dyn: CoupledDynamics):
        self.dyn = dyn
        H = dyn.H
        self.dims = [(H - 1) * (dyn.n[i] + dyn.p[i]) for i in range(dyn.N)]
        self.row_base = np.concatenate([[0], np.cumsum([(H - 1) * ni for ni in dyn.n])]).astype(int)
        self.m = int(self.row_base[-1])

    def x_cols(self, i, t) -> slice:
        """Columns of ``x_i^t`` (``t = 2..H``) within agent ``i``."""
        n = self.dyn.n[i]
        return slice((t - 2) * n, (t - 1) * n)

    def u_cols(self, i, t) -> slice:
        """Columns of ``u_i^t`` (``t = 1..H-1``) within agent ``i``."""
        n, p, H = self.dyn.n[i], self.dyn.p[i], self.dyn.H
        start = (H - 1) * n + (t - 1) * p
        return slice(start, start + p)

    def rows(self, i, t) -> slice:
        start = int(self.row_base[i]) + (t - 1) * self.dyn.n[i]
        return slice(start, start + self.dyn.n[i])

    def unpack_agent(self, i, xi, x1):
        """``(xs, us)`` for one agent; ``xs[t-1]`` is ``x_i^t`` with ``xs[0] = x1``."""
        xs = [np.asarray(x1, dtype=float)] + [xi[self.x_cols(i, t)] for t in range(2, self.dyn.H + 1)]
        us = [xi[self.u_cols(i, t)] for t in range(1, self.dyn.H)]
        return xs, us

    def pack_agent(self, i, xs, us):
        """Inverse of :meth:`unpack_agent` (``xs`` without the initial state)."""
        return np.concatenate([np.asarray(v, dtype=float).reshape(-1) for v in list(xs) + list(us)])


def compile_mpc(instance: MpcInstance) -> PartitionedProblem:
    """Compile the MPC problem at ``instance.x_init`` into a partitioned program."""
    bad = instance.validate()
    if bad:
        raise ValueError("invalid MPC instance: " + "; ".join(bad))
    dyn = instance.dynamics
    lay = MpcLayout(dyn)
    H, N = dyn.H, dyn.N
    objs, sets, blocks = [], [], []
    for i in range(N):
        Qs, qs = [], []
        for t in range(2, H):
            s = instance.stage(i, t)
            Qs.append(s.Q)
            qs.append(s.q)
        term = instance.terminal_costs[i]
        Qs.append(term.P)
        qs.append(term.q)
        for t in range(1, H):
            s = instance.stage(i, t)
            Qs.append(s.R)
            qs.append(s.r)
        Qi = block_diag(*Qs)
        Qi = 0.5 * (Qi + Qi.T)
        const = instance.stage(i, 1).state_value(instance.x_init[i])
        objs.append(ConvexObjective.quadratic(Qi, np.concatenate(qs), const))
        parts = [instance.state_set(i, t) for t in range(2, H + 1)]
        parts += [instance.input_set(i, t) for t in range(1, H)]
        sets.append(product_of(parts))

    for j in range(N):
        rows, cols, vals = [], [], []

        def put(rsl, csl, M):
            r, c = np.nonzero(M)
            rows.extend(rsl.start + r)
            cols.extend(csl.start + c)
            vals.extend(M[r, c])

        for i in range(N):
            for t in range(1, H):
                rs = lay.rows(i, t)
                if i == j:
                    put(rs, lay.x_cols(j, t + 1), np.eye(dyn.n[i]))
                if t >= 2:
                    put(rs, lay.x_cols(j, t), -dyn.a(t, i, j))
                put(rs, lay.u_cols(j, t), -dyn.b(t, i, j))
        blocks.append(CouplingBlock.from_arrays(j, lay.m, lay.dims[j], rows, cols, vals))

    b = np.zeros(lay.m)
    for i in range(N):
        acc = np.zeros(dyn.n[i])
        for j in dyn.in_neighbors(i, 1):
            acc = acc + dyn.a(1, i, j) @ instance.x_init[j]
        b[lay.rows(i, 1)] = acc
    return PartitionedProblem(objs, sets, blocks, b)


def two_hop_neighborhood(dyn: CoupledDynamics, i: int) -> set:
    """In-, out-, and in-neighbors of out-neighbors over all times, without ``i``."""
    if isinstance(dyn, MpcInstance):
        dyn = dyn.dynamics
    out = set()
    for t in range(1, dyn.H):
        out.update(dyn.in_neighbors(i, t))
        outn = dyn.out_neighbors(i, t)
        out.update(outn)
        for j in outn:
            out.update(dyn.in_neighbors(j, t))
    out.discard(i)
    return out


def dynamics_violation(instance: MpcInstance, xs, us) -> np.ndarray:
    """Stacked ``x_i^{t+1} - sum_j (A_ij^t x_j^t + B_ij^t u_j^t)`` by direct simulation.

    ``xs[i][t-2]`` is ``x_i^t`` for ``t = 2..H``; ``us[i][t-1]`` is ``u_i^t``.
    """
    dyn = instance.dynamics
    lay = MpcLayout(dyn)
    full = [[instance.x_init[i]] + list(xs[i]) for i in range(dyn.N)]
    out = np.zeros(lay.m)
    for t in range(1, dyn.H):
        pred = dyn.propagate(t, [full[j][t - 1] for j in range(dyn.N)], [us[j][t - 1] for j in range(dyn.N)])
        for i in range(dyn.N):
            out[lay.rows(i, t)] = full[i][t] - pred[i]
    return out


def _block_parts(instance, snapshot):
    lay = MpcLayout(instance.dynamics)
    off = np.concatenate([[0], np.cumsum(lay.dims)]).astype(int)
    return lay, [lay.unpack_agent(j, snapshot[off[j]:off[j + 1]], instance.x_init[j])
                 for j in range(instance.N)]


def local_al_blocks(instance: MpcInstance, i: int, xi, snapshot, lam, rho: float) -> float:
    """Subsystem ``i``'s local AL written directly in terms of dynamics blocks.

    Other subsystems' states and inputs are read from ``snapshot``; ``lam``
    is indexed like the compiled rows.
    """
    dyn = instance.dynamics
    lay, others = _block_parts(instance, snapshot)
    xs, us = lay.unpack_agent(i, np.asarray(xi, dtype=float), instance.x_init[i])
    H = dyn.H
    val = sum(instance.stage(i, t).state_value(xs[t - 1]) + instance.stage(i, t).input_value(us[t - 1])
              for t in range(1, H))
    val += instance.terminal_costs[i].value(xs[H - 1])

    def other_x(m, t):
        return others[m][0][t - 1]

    def other_u(m, t):
        return others[m][1][t - 1]

    for t in range(1, H):
        li = lam[lay.rows(i, t)]
        val += float(li @ xs[t])
        outn = dyn.out_neighbors(i, t)
        for j in outn:
            val -= float(lam[lay.rows(j, t)] @ (dyn.a(t, j, i) @ xs[t - 1] + dyn.b(t, j, i) @ us[t - 1]))
        own = xs[t] - dyn.a(t, i, i) @ xs[t - 1] - dyn.b(t, i, i) @ us[t - 1]
        for j in dyn.in_neighbors(i, t):
            if j != i:
                own = own - dyn.a(t, i, j) @ other_x(j, t) - dyn.b(t, i, j) @ other_u(j, t)
        val += 0.5 * rho * float(own @ own)
        # i's own row is already penalized above, so it is skipped here
        for j in outn:
            if j == i:
                continue
            rj = other_x(j, t + 1) - dyn.a(t, j, i) @ xs[t - 1] - dyn.b(t, j, i) @ us[t - 1]
            for m in dyn.in_neighbors(j, t):
                if m != i:
                    rj = rj - dyn.a(t, j, m) @ other_x(m, t) - dyn.b(t, j, m) @ other_u(m, t)
            val += 0.5 * rho * float(rj @ rj)
    return val


def blocks_al_offset(instance: MpcInstance, problem: PartitionedProblem, i: int, snapshot, lam, rho: float) -> float:
    """Difference between :func:`local_al_blocks` and the generic local AL on ``Q_i``.

    Two terms do not depend on agent ``i``'s variables: the multiplier terms
    carrying the fixed ``x_i^1``, and the penalties of rows that ``i`` touches
    only through ``x_i^1``.
    """
    dyn = instance.dynamics
    lay = MpcLayout(dyn)
    kappa = 0.0
    for j in dyn.out_neighbors(i, 1):
        kappa -= float(lam[lay.rows(j, 1)] @ (dyn.a(1, j, i) @ instance.x_init[i]))
    rows = set()
    for t in range(1, dyn.H):
        rows.update(range(lay.rows(i, t).start, lay.rows(i, t).stop))
        for j in dyn.out_neighbors(i, t):
            rows.update(range(lay.rows(j, t).start, lay.rows(j, t).stop))
    extra = np.array(sorted(rows.difference(problem.support(i).tolist())), dtype=int)
    r = residual(problem, snapshot)
    return kappa + 0.5 * rho * float(np.sum(r[extra] ** 2))


def local_al_generic(problem: PartitionedProblem, i: int, xi, snapshot, lam, rho: float) -> float:
    return assemble(problem, i, snapshot, lam, rho).value(xi)


# closed loop -----------------------------------------------------------------

@dataclass
class ControllerConfig:
    """Receding-horizon controller settings.

    ``eps`` ends each ADAL solve once the ergodic plan residual is below it;
    with ``use_certified_k`` the iteration budget is also capped by the
    certified count for that accuracy.
    """

    eps: float = 1e-3
    use_certified_k: bool = True
    steps_applied: int = 1
    sim_steps: int = 20
    max_iters: int = 20000
    penalty: str = "rho_star_2"
    rho: float | None = None
    tau: float | None = None
    apply_from: str = "ergodic"
    warm_start: bool = True
    with_oracle: bool = True
    threads: int = 1


@dataclass
class ClosedLoopTrace:
    steps: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    def column(self, name) -> np.ndarray:
        return np.array([s[name] for s in self.steps], dtype=float)

    def state_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(s["state"]) for s in self.steps])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "inputs", "state", "plan_residual", "suboptimality", "adal_iterations",
                    "constraint_violation"])
        for s in self.steps:
            w.writerow([s["step"], " ".join(repr(float(v)) for v in s["inputs"]),
                        " ".join(repr(float(v)) for v in s["state"]), repr(s["plan_residual"]),
                        repr(s["suboptimality"]), s["adal_iterations"], int(s["constraint_violation"])])
        return buf.getvalue()


def _shift_plan(lay: MpcLayout, problem, x, s):
    # drop the first s stages of each agent's plan and repeat the last one
    dyn = lay.dyn
    parts = problem.split(x)
    out = []
    for i in range(dyn.N):
        xs = [parts[i][lay.x_cols(i, t)] for t in range(2, dyn.H + 1)]
        us = [parts[i][lay.u_cols(i, t)] for t in range(1, dyn.H)]
        xs = xs[s:] + [xs[-1]] * min(s, len(xs))
        us = us[s:] + [us[-1]] * min(s, len(us))
        out.append(lay.pack_agent(i, xs, us))
    return problem.stack(out)


def _shift_duals(lay: MpcLayout, lam, s):
    dyn = lay.dyn
    out = np.empty_like(lam)
    for i in range(dyn.N):
        for t in range(1, dyn.H):
            src = min(t + s, dyn.H - 1)
            out[lay.rows(i, t)] = lam[lay.rows(i, src)]
    return out


def _applied(lay, problem, plan, steps):
    parts = problem.split(plan)
    return [[parts[i][lay.u_cols(i, t)] for i in range(lay.dyn.N)] for t in range(1, steps + 1)]


def _in_sets(instance, i, t, x) -> bool:
    return instance.state_set(i, min(max(t, 2), instance.H)).contains(x, 1e-9)


def receding_horizon(instance: MpcInstance, config: ControllerConfig | None = None) -> ClosedLoopTrace:
    """Closed loop driven by early-terminated ADAL solves.

    Each solve starts from the previous plan and multipliers shifted by the
    number of applied steps (when ``warm_start``), applies the first
    ``steps_applied`` inputs of the ergodic plan to the true dynamics, and
    records the plan residual and the suboptimality against the oracle.
    """
    cfg = config or ControllerConfig()
    if not 1 <= cfg.steps_applied <= instance.H - 1:
        raise ValueError(f"steps_applied must lie in [1, {instance.H - 1}]")
    lay = MpcLayout(instance.dynamics)
    trace = ClosedLoopTrace()
    x_now = [v.copy() for v in instance.x_init]
    inst = instance
    warm_x = warm_lam = None
    cert_cache = {}
    t_sim = 0
    while t_sim < cfg.sim_steps:
        inst = inst.with_initial_state(x_now)
        problem = compile_mpc(inst)
        q = max_degree(problem)
        tau = cfg.tau if cfg.tau is not None else 0.9 / q
        key = id(inst.dynamics)
        if key not in cert_cache:
            eps_c = cfg.eps if math.isfinite(cfg.eps) else 1.0
            cert_cache[key] = certify(problem, eps_c, tau)
        cert = cert_cache[key]
        rho = cfg.rho if cfg.rho is not None else (
            cert.rho_star_2 if cfg.penalty == "rho_star_2" and cert.rho_star_2 > 0 else cert.rho_star_1)
        budget = cfg.max_iters
        if cfg.use_certified_k and math.isfinite(cfg.eps):
            budget = min(budget, cert.k_eps_2 if cfg.penalty == "rho_star_2" else cert.k_eps_1)
        acfg = AdalConfig(rho=rho, tau=tau, q=q, max_iters=max(1, budget), eps=cfg.eps, stop_tol=0.0,
                          stop_on_ergodic=True, check_invariants=False, threads=cfg.threads)
        state, tr = run(problem, acfg, x0=warm_x, lam0=warm_lam)
        plan = state.ergodic() if cfg.apply_from == "ergodic" else state.x
        plan_res = float(np.linalg.norm(residual(problem, plan)))
        subopt = math.nan
        if cfg.with_oracle:
            sp = solve_centralized(problem)
            subopt = objective_value(problem, plan) - sp.F_star
        n_apply = min(cfg.steps_applied, cfg.sim_steps - t_sim)
        for s, us in enumerate(_applied(lay, problem, plan, n_apply)):
            t_abs = t_sim + 1
            x_now = inst.dynamics.propagate(1 + s, x_now, us)
            viol = not all(_in_sets(inst, i, 2 + s, x_now[i]) for i in range(inst.N))
            if viol:
                trace.violations.append(t_abs)
            trace.steps.append({
                "step": t_abs,
                "inputs": np.concatenate(us),
                "state": np.concatenate(x_now),
                "plan_residual": plan_res,
                "suboptimality": subopt,
                "adal_iterations": state.k if s == 0 else 0,
                "constraint_violation": viol,
            })
            t_sim += 1
        inst = MpcInstance(inst.dynamics.shifted(n_apply), inst.stage_costs, inst.terminal_costs,
                           inst.state_sets, inst.input_sets, x_now)
        if cfg.warm_start:
            warm_x = _shift_plan(lay, problem, plan, n_apply)
            warm_lam = _shift_duals(lay, state.lam, n_apply)
    return trace


def oracle_closed_loop(instance: MpcInstance, steps_applied: int = 1, sim_steps: int = 20) -> ClosedLoopTrace:
    """Reference closed loop that applies exact centralized MPC solutions."""
    lay = MpcLayout(instance.dynamics)
    trace = ClosedLoopTrace()
    x_now = [v.copy() for v in instance.x_init]
    inst = instance
    t_sim = 0
    while t_sim < sim_steps:
        inst = inst.with_initial_state(x_now)
        problem = compile_mpc(inst)
        sp = solve_centralized(problem)
        n_apply = min(steps_applied, sim_steps - t_sim)
        for s, us in enumerate(_applied(lay, problem, sp.x_star, n_apply)):
            x_now = inst.dynamics.propagate(1 + s, x_now, us)
            t_sim += 1
            trace.steps.append({"step": t_sim, "inputs": np.concatenate(us), "state": np.concatenate(x_now),
                                "plan_residual": float(np.linalg.norm(residual(problem, sp.x_star))),
                                "suboptimality": 0.0, "adal_iterations": 0, "constraint_violation": False})
        inst = MpcInstance(inst.dynamics.shifted(n_apply), inst.stage_costs, inst.terminal_costs,
                           inst.state_sets, inst.input_sets, x_now)
    return trace


# file format -----------------------------------------------------------------

def _cost_from_dict(d, where):
    _fields(d, where, ("Q", "R"), ("q", "r"))
    return StageCost(d["Q"], d["R"], d.get("q"), d.get("r"))


def mpc_from_dict(doc) -> MpcInstance:
    """Build an instance from the JSON layout

    ``{N, H, subsystems: [{n, p, stage_cost: {Q, R, q?, r?}, terminal_cost: {P, q?},
    state_set, input_set}], edges: [{t?, from, to, A?, B?}], x_init}``.

    An edge without ``t`` applies at every time ``1..H-1``.
    """
    _fields(doc, "mpc", ("N", "H", "subsystems", "edges", "x_init"))
    N, H = int(doc["N"]), int(doc["H"])
    subs = doc["subsystems"]
    if len(subs) != N:
        raise ProblemFormatError(f"mpc: N={N} but {len(subs)} subsystems")
    n, p, stage, term, xsets, usets = [], [], [], [], [], []
    for i, s in enumerate(subs):
        where = f"subsystems[{i}]"
        _fields(s, where, ("n", "p", "stage_cost", "terminal_cost", "state_set", "input_set"))
        n.append(int(s["n"]))
        p.append(int(s["p"]))
        sc = s["stage_cost"]
        stage.append([_cost_from_dict(c, f"{where}.stage_cost[{t}]") for t, c in enumerate(sc)]
                     if isinstance(sc, list) else _cost_from_dict(sc, f"{where}.stage_cost"))
        _fields(s["terminal_cost"], f"{where}.terminal_cost", ("P",), ("q",))
        term.append(TerminalCost(s["terminal_cost"]["P"], s["terminal_cost"].get("q")))
        xsets.append(set_from_dict(s["state_set"], f"{where}.state_set"))
        usets.append(set_from_dict(s["input_set"], f"{where}.input_set"))
    A, B = {}, {}
    for k, e in enumerate(doc["edges"]):
        where = f"edges[{k}]"
        _fields(e, where, ("from", "to"), ("t", "A", "B"))
        j, i = int(e["from"]), int(e["to"])
        times = [int(e["t"])] if e.get("t") is not None else list(range(1, H))
        for t in times:
            if not 1 <= t <= H - 1:
                raise ProblemFormatError(f"{where}: t={t} outside [1, {H - 1}]")
            if "A" in e:
                A[(t, i, j)] = np.array(e["A"], dtype=float).reshape(n[i], n[j])
            if "B" in e:
                B[(t, i, j)] = np.array(e["B"], dtype=float).reshape(n[i], p[j])
    dyn = CoupledDynamics(n, p, H, A, B)
    return MpcInstance(dyn, stage, term, xsets, usets, [np.array(x, dtype=float) for x in doc["x_init"]])


def load_mpc(path) -> MpcInstance:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFormatError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return mpc_from_dict(doc)


def coupled_double_integrators(N: int = 4, H: int = 8, dt: float = 0.5, coupling: float = 0.1,
                               x_init: Sequence | None = None, state_bound: float = 20.0,
                               input_bound: float = 2.0, q_weight: float = 1.0, r_weight: float = 0.1,
                               terminal_weight: float = 10.0) -> MpcInstance:
    """``N`` double integrators in a ring, each position pulled by its two neighbors."""
    Ad = np.array([[1.0, dt], [0.0, 1.0]])
    Bd = np.array([[0.5 * dt * dt], [dt]])
    Ac = np.array([[0.0, 0.0], [coupling * dt, 0.0]])
    A_blocks, B_blocks = {}, {}
    for i in range(N):
        A_blocks[(i, i)] = Ad - (2.0 * Ac if N > 2 else Ac if N == 2 else 0.0 * Ac)
        B_blocks[(i, i)] = Bd
        for j in {(i - 1) % N, (i + 1) % N} - {i}:
            A_blocks[(i, j)] = Ac
    dyn = CoupledDynamics.time_invariant([2] * N, [1] * N, H, A_blocks, B_blocks)
    stage = [StageCost(q_weight * np.eye(2), r_weight * np.eye(1)) for _ in range(N)]
    term = [TerminalCost(terminal_weight * np.eye(2)) for _ in range(N)]
    xs = [Box(-state_bound * np.ones(2), state_bound * np.ones(2)) for _ in range(N)]
    us = [Box(-input_bound * np.ones(1), input_bound * np.ones(1)) for _ in range(N)]
    if x_init is None:
        x_init = [np.array([1.0 + 0.5 * i, 0.0]) for i in range(N)]
    return MpcInstance(dyn, stage, term, xs, us, list(x_init))
