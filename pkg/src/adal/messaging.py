"""In-process replay of an ADAL run as explicit message passing.

Each agent rebuilds its local subproblem only from what it was sent: the
contributions ``[A_j x_j]_l`` of co-members on shared rows ``l``, and the
multipliers of its own rows. The multiplier of row ``l`` is held by a virtual
owner, the lowest-indexed agent coupling that row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import AdalConfig
from .local_solver import assemble_from_messages, shared_rows, solve_with_stats
from .problem import PartitionedProblem

__all__ = ["LocalityViolation", "MessageLedger", "Mailbox", "simulate_messaging", "dual_owners"]


class LocalityViolation(RuntimeError):
    def __init__(self, agent, row, iteration, kind):
        super().__init__(f"locality violation: agent {agent} was sent {kind} row {row} at iteration {iteration}")
        self.agent, self.row, self.iteration, self.kind = agent, row, iteration, kind


class ReplayMismatch(AssertionError):
    pass


def dual_owners(problem: PartitionedProblem) -> np.ndarray:
    owner = np.full(problem.m, -1, dtype=int)
    for i in reversed(range(problem.N)):
        owner[problem.support(i)] = i
    return owner


class Mailbox:
    """What one agent has received during one iteration."""

    def __init__(self, problem, agent, iteration):
        self.problem, self.agent, self.iteration = problem, agent, iteration
        self.primal = {}
        self.duals = np.full(problem.support(agent).shape[0], np.nan)

    def deliver_primal(self, sender, rows, values):
        common, _, _ = shared_rows(self.problem, self.agent, sender)
        for r in rows:
            if sender == self.agent or r not in common:
                raise LocalityViolation(self.agent, int(r), self.iteration, "primal")
        self.primal[sender] = np.asarray(values, dtype=float)

    def deliver_duals(self, rows, values):
        sup = self.problem.support(self.agent)
        pos = np.searchsorted(sup, rows)
        for r, p in zip(rows, pos):
            if p >= sup.size or sup[p] != r:
                raise LocalityViolation(self.agent, int(r), self.iteration, "dual")
        self.duals[pos] = values


@dataclass
class MessageLedger:
    """Scalar counts per iteration and agent, split by kind.

    Arrays are ``(iterations, N)``. Dual scalars an owner delivers to itself
    are counted as received but not as sent.
    """

    primal_sent: np.ndarray
    primal_received: np.ndarray
    dual_sent: np.ndarray
    dual_received: np.ndarray
    replayed: int = 0
    mismatches: list = field(default_factory=list)

    def totals(self) -> dict:
        return {k: getattr(self, k).sum(axis=0).tolist()
                for k in ("primal_sent", "primal_received", "dual_sent", "dual_received")}


def simulate_messaging(problem: PartitionedProblem, history: dict, config: AdalConfig,
                       strict: bool = True) -> MessageLedger:
    """Replay stored iterates through mailboxes and re-solve every local problem.

    Parameters
    ----------
    history : dict
        ``trace.history`` of a run made with ``keep_history=True``: lists
        ``x`` and ``lam`` (one entry per iterate) and ``x_hat``.
    strict : bool
        Raise :class:`ReplayMismatch` when a re-solved candidate differs from
        the recorded one in any bit.
    """
    xs, lams, hats = history["x"], history["lam"], history["x_hat"]
    K = len(hats)
    N = problem.N
    owner = dual_owners(problem)
    led = MessageLedger(*(np.zeros((K, N), dtype=int) for _ in range(4)))
    for k in range(K):
        parts = problem.split(xs[k])
        lam = lams[k]
        boxes = [Mailbox(problem, i, k) for i in range(N)]
        for j in range(N):
            contrib = problem.contribution(j, parts[j])
            for i in range(N):
                if i == j:
                    continue
                common, _, pj = shared_rows(problem, i, j)
                if common.size:
                    boxes[i].deliver_primal(j, common, contrib[pj])
                    led.primal_sent[k, j] += common.size
                    led.primal_received[k, i] += common.size
        for i in range(N):
            rows = problem.support(i)
            boxes[i].deliver_duals(rows, lam[rows])
            led.dual_received[k, i] += rows.size
            for r in rows:
                if owner[r] != i:
                    led.dual_sent[k, owner[r]] += 1
        got = []
        for i in range(N):
            mb = boxes[i]
            sub = assemble_from_messages(problem, i, parts[i], mb.primal, mb.duals, config.rho)
            got.append(solve_with_stats(sub, config.inner_tol).x)
        x_hat = problem.stack(got)
        if not np.array_equal(x_hat, hats[k]):
            led.mismatches.append(k)
            if strict:
                raise ReplayMismatch(f"replayed candidate differs from the recorded one at iteration {k}")
        led.replayed += 1
    return led
