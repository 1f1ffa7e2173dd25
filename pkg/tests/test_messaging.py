import numpy as np
import pytest

from adal.dmpc import compile_mpc
from adal.engine import AdalConfig, run
from adal.generate import GeneratorSpec, generate
from adal.messaging import LocalityViolation, Mailbox, ReplayMismatch, dual_owners, simulate_messaging
from adal.problem import Box, ConvexObjective, CouplingBlock, PartitionedProblem

from test_dmpc import scalar_chain


def _replay(problem, iters=30, **kw):
    cfg = AdalConfig.for_problem(problem, max_iters=iters, stop_tol=0.0, keep_history=True, **kw)
    _, tr = run(problem, cfg)
    return tr, cfg, simulate_messaging(problem, tr.history, cfg)


def test_canonical_sends_one_scalar(canonical):
    _, _, led = _replay(canonical)
    assert (led.primal_sent == 1).all() and (led.primal_received == 1).all()
    # agent 0 owns the shared multiplier and sends it to agent 1
    assert led.dual_sent[:, 0].tolist() == [1] * led.replayed
    assert (led.dual_sent[:, 1] == 0).all()


def test_decoupled_dmpc_sends_no_primal():
    p = compile_mpc(scalar_chain(N=3))
    _, _, led = _replay(p, iters=10, rho=1.0)
    assert led.primal_sent.sum() == 0 and led.dual_sent.sum() == 0


def test_complete_row_broadcasts():
    N = 4
    p = PartitionedProblem([ConvexObjective.quadratic([[1.0]]) for _ in range(N)],
                           [Box([-1.0], [1.0]) for _ in range(N)],
                           [CouplingBlock.from_dense(i, [[1.0 + i]]) for i in range(N)], [0.5])
    _, _, led = _replay(p, iters=5)
    assert (led.primal_sent == N - 1).all() and (led.primal_received == N - 1).all()


def test_replay_is_bitwise():
    for seed in range(5):
        p = generate(GeneratorSpec(seed=seed))
        tr, _, led = _replay(p, iters=40)
        assert led.replayed == len(tr.history["x_hat"]) and not led.mismatches


def test_owner_is_lowest_index(canonical):
    assert dual_owners(canonical).tolist() == [0]


def test_mailbox_rejects_foreign_rows():
    A0 = np.array([[1.0], [0.0]])
    A1 = np.array([[1.0], [1.0]])
    p = PartitionedProblem([ConvexObjective.quadratic([[1.0]]) for _ in range(2)],
                           [Box([-1.0], [1.0]) for _ in range(2)],
                           [CouplingBlock.from_dense(0, A0), CouplingBlock.from_dense(1, A1)], [0.5, 0.2])
    mb = Mailbox(p, 0, 7)
    with pytest.raises(LocalityViolation) as ei:
        mb.deliver_primal(1, [1], [0.3])
    assert (ei.value.agent, ei.value.row, ei.value.iteration) == (0, 1, 7)
    with pytest.raises(LocalityViolation, match="dual row 1"):
        mb.deliver_duals([1], [0.1])


def test_tampered_history_is_caught(canonical):
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2, max_iters=10, stop_tol=0.0, keep_history=True)
    _, tr = run(canonical, cfg)
    tr.history["x_hat"][3] = np.nextafter(tr.history["x_hat"][3], 10.0)
    with pytest.raises(ReplayMismatch, match="iteration 3"):
        simulate_messaging(canonical, tr.history, cfg)
    led = simulate_messaging(canonical, tr.history, cfg, strict=False)
    assert led.mismatches == [3]
