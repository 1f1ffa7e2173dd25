import numpy as np
import pytest

import adal.engine as engine
from adal.engine import AdalConfig, InvariantViolation, check_stop, initial_state, merit, run, step
from adal.generate import GeneratorSpec, generate
from adal.local_solver import InnerSolverError
from adal.oracle import SaddlePoint, solve_centralized
from adal.problem import residual

CANON_STAR = SaddlePoint(np.array([0.5, 0.5]), np.array([1.0]), 0.5, 0.0)


def test_first_step_by_hand(canonical):
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2)
    s1, _ = step(canonical, initial_state(canonical, cfg), cfg)
    assert s1.x_hat == pytest.approx([1.0, 1.0], abs=1e-12)
    assert s1.x == pytest.approx([0.45, 0.45], abs=1e-12)
    assert residual(canonical, s1.x) == pytest.approx([-0.1], abs=1e-12)
    assert s1.lam == pytest.approx([-0.045], abs=1e-12)


def test_saddle_point_is_fixed(canonical):
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2)
    s0 = initial_state(canonical, cfg, x0=[0.5, 0.5], lam0=[1.0])
    s1, _ = step(canonical, s0, cfg)
    assert np.abs(s1.x_hat - s0.x).max() <= 1e-10
    assert np.abs(s1.lam - s0.lam).max() <= 1e-10
    assert check_stop(canonical, s1, 1e-8)


@pytest.mark.parametrize("tau", [0.0, 0.5, -0.1, 0.6])
def test_tau_outside_interval_rejected(tau):
    with pytest.raises(ValueError, match=r"tau must lie in \(0, 1/q\) with q=2"):
        AdalConfig(rho=1.0, tau=tau, q=2)


def test_check_stop(canonical):
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2)
    s0 = initial_state(canonical, cfg)
    assert not check_stop(canonical, s0, 1e-8)
    assert check_stop(canonical, s0, np.inf)


def test_merit_by_hand(canonical):
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2)
    s0 = initial_state(canonical, cfg, x0=[0.0, 0.0])
    assert s0.lam_bar == pytest.approx([-0.55])
    assert merit(canonical, s0, [0.0], CANON_STAR.x_star, 1.0) == pytest.approx(0.8025, abs=1e-14)


def test_merit_vanishes_at_saddle(canonical):
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2)
    s = initial_state(canonical, cfg, x0=[0.5, 0.5], lam0=[1.0])
    assert merit(canonical, s, s.lam_bar, CANON_STAR.x_star, 1.0) == 0.0


def test_merit_scales_with_rho(canonical):
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2)
    s = initial_state(canonical, cfg, x0=[0.0, 0.0])
    x_star = CANON_STAR.x_star
    prim = merit(canonical, s, s.lam_bar, x_star, 1.0)
    dual = merit(canonical, s, s.lam_bar + 1.0, x_star, 1.0) - prim
    assert merit(canonical, s, s.lam_bar + 1.0, x_star, 2.0) == pytest.approx(2 * prim + dual / 2)


def test_canonical_converges(canonical):
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2, max_iters=500)
    st, tr = run(canonical, cfg, oracle=CANON_STAR)
    assert np.abs(st.x - CANON_STAR.x_star).max() <= 1e-4
    assert np.linalg.norm(residual(canonical, st.x)) <= 1e-6
    assert tr.stop_reason == "converged" and not tr.bound_violations


def test_already_optimal_gives_single_record(canonical):
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2)
    st, tr = run(canonical, cfg, x0=[0.5, 0.5], lam0=[1.0])
    assert len(tr.records) == 1 and tr.stop_reason == "converged"


def test_runs_are_bitwise_reproducible():
    p = generate(GeneratorSpec(seed=5))
    o = solve_centralized(p)
    cfg = AdalConfig.for_problem(p, max_iters=200, stop_tol=0.0)
    a = run(p, cfg, probes=[np.ones(p.m)], oracle=o)[1]
    b = run(p, cfg, probes=[np.ones(p.m)], oracle=o)[1]
    assert a.to_csv() == b.to_csv() and a.summary_json() == b.summary_json()


def test_record_count_and_ergodic_consistency():
    p = generate(GeneratorSpec(seed=8))
    cfg = AdalConfig.for_problem(p, max_iters=150, stop_tol=0.0, keep_history=True)
    st, tr = run(p, cfg)
    assert len(tr.records) == st.k + 1
    hats = np.array(tr.history["x_hat"])
    np.testing.assert_allclose(hats.mean(axis=0), st.ergodic(), rtol=0, atol=1e-12)


def test_iterates_stay_in_x():
    p = generate(GeneratorSpec(seed=13, ball_fraction=0.6))
    cfg = AdalConfig.for_problem(p, max_iters=100, stop_tol=0.0, keep_history=True)
    _, tr = run(p, cfg)
    for x in tr.history["x"]:
        for s, xi in zip(p.sets, p.split(x)):
            assert s.contains(xi, 1e-12)


def test_strict_mode_raises_on_violation(canonical):
    # a wrong reference saddle point breaks the merit monotonicity
    wrong = SaddlePoint(np.array([0.0, 1.0]), np.array([5.0]), 0.0, 0.0)
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2, max_iters=50, strict=True)
    with pytest.raises(InvariantViolation):
        run(canonical, cfg, oracle=wrong)


def test_inner_failure_keeps_partial_trace(canonical, monkeypatch):
    calls = {"n": 0}
    real = engine.solve_with_stats

    def flaky(sub, tol):
        calls["n"] += 1
        if calls["n"] > 4:
            raise InnerSolverError("inner solver failed: gap 1.0e+00", 1.0)
        return real(sub, tol)

    monkeypatch.setattr(engine, "solve_with_stats", flaky)
    cfg = AdalConfig(rho=1.0, tau=0.45, q=2, max_iters=50)
    with pytest.raises(InnerSolverError) as ei:
        run(canonical, cfg)
    assert ei.value.agent == 0 and ei.value.iteration == 2
    assert [r[0] for r in ei.value.trace.records] == [0, 1, 2]


def test_thread_pool_matches_sequential():
    p = generate(GeneratorSpec(seed=2))
    cfg = AdalConfig.for_problem(p, max_iters=100, stop_tol=0.0)
    seq = run(p, cfg)[1].to_csv()
    par = run(p, engine.replace_config(cfg, threads=4))[1]
    assert par.to_csv().replace("threads=4", "") == seq
