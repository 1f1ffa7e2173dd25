import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adal.generate import GeneratorSpec, generate
from adal.problem import (Ball, Box, ConvexObjective, CouplingBlock, PartitionedProblem, max_degree,
                          objective_subgradient, objective_value, prepare, residual, row_degrees, validate)

from helpers import dense_residual


def _blocks(*dense):
    return [CouplingBlock.from_dense(i, D) for i, D in enumerate(dense)]


def test_canonical_validates(canonical):
    rep = validate(canonical)
    assert rep.ok and not rep.warnings


def test_empty_box_is_reported(canonical):
    canonical.sets[0] = Box([1.0], [0.0])
    rep = validate(canonical)
    assert not rep.ok
    assert any("empty local set" in v for v in rep.violations)


def test_unbounded_box_is_reported(canonical):
    canonical.sets[1] = Box([-np.inf], [1.0])
    assert any("unbounded set" in v for v in validate(canonical).violations)


def test_vacuous_row_with_nonzero_rhs_is_rejected():
    p = PartitionedProblem([ConvexObjective.quadratic([[1.0]])], [Box([0.0], [1.0])],
                           _blocks([[1.0], [0.0]]), [0.2, 0.5])
    rep = validate(p)
    assert any("vacuous infeasible row" in v for v in rep.violations)
    with pytest.raises(ValueError, match="vacuous infeasible row"):
        prepare(p)


def test_vacuous_zero_row_is_pruned_with_warning():
    p = PartitionedProblem([ConvexObjective.quadratic([[1.0]])], [Box([0.0], [1.0])],
                           _blocks([[1.0], [0.0]]), [0.2, 0.0])
    rep = validate(p)
    assert rep.ok and rep.vacuous_rows == [1]
    with pytest.warns(UserWarning, match="pruned"):
        pruned = prepare(p)
    assert pruned.m == 1 and pruned.b.tolist() == [0.2]


def test_non_psd_and_asymmetric_q():
    bad = ConvexObjective.quadratic([[1.0, 0.0], [0.0, -1.0]])
    assert "Q not positive semidefinite" in bad.check()
    asym = ConvexObjective.quadratic([[1.0, 0.5], [0.0, 1.0]])
    assert "Q not symmetric" in asym.check()


def test_dimension_mismatch_is_reported(canonical):
    canonical.sets[0] = Box([0.0, 0.0], [1.0, 1.0])
    assert any("dimension mismatch" in v for v in validate(canonical).violations)


def test_ball_radius_must_be_positive():
    assert Ball([0.0], 0.0).check() == ["ball radius must be positive"]


@pytest.mark.parametrize("dense, expected", [
    (([[1.0], [1.0]], [[1.0], [0.0]]), 2),
    (([[1.0]], [[1.0]]), 2),
    (([[1.0], [1.0]], [[1.0], [0.0]], [[2.0], [0.0]]), 3),
])
def test_max_degree(dense, expected):
    n = len(dense)
    m = len(dense[0])
    p = PartitionedProblem([ConvexObjective.quadratic([[1.0]]) for _ in range(n)],
                           [Box([0.0], [1.0]) for _ in range(n)], _blocks(*dense), np.zeros(m))
    assert max_degree(p) == expected


def test_max_degree_rejects_unpruned_rows():
    p = PartitionedProblem([ConvexObjective.quadratic([[1.0]])], [Box([0.0], [1.0])],
                           _blocks([[1.0], [0.0]]), [0.0, 0.0])
    assert row_degrees(p).tolist() == [1, 0]
    with pytest.raises(ValueError, match="couple no agent"):
        max_degree(p)


def test_canonical_residual_and_objective(canonical):
    assert residual(canonical, [0.5, 0.5]).tolist() == [0.0]
    assert residual(canonical, [0.0, 0.0]).tolist() == [-1.0]
    assert objective_value(canonical, [0.5, 0.5]) == pytest.approx(0.5, abs=1e-15)
    assert objective_subgradient(canonical, 0, [0.0]).tolist() == [-2.0]


def test_constant_objective():
    f = ConvexObjective.quadratic(np.zeros((2, 2)), np.zeros(2), 3.0)
    assert f.value(np.array([7.0, -4.0])) == 3.0


def test_residual_matches_dense_product(rng):
    p = generate(GeneratorSpec(seed=3, N=3))
    for _ in range(10):
        x = rng.normal(size=p.n)
        np.testing.assert_allclose(residual(p, x), dense_residual(p, x), atol=1e-13)


def test_residual_rejects_wrong_length(canonical):
    with pytest.raises(ValueError, match="expected"):
        residual(canonical, [1.0, 2.0, 3.0])


def test_triplets_are_canonicalized():
    c = CouplingBlock.from_triplets(0, 3, 2, [[2, 1, 1.0], [0, 0, 2.0], [2, 1, 0.5], [1, 0, 0.0]])
    assert c.triplets() == [[0, 0, 2.0], [2, 1, 1.5]]
    assert c.support.tolist() == [0, 2]
    with pytest.raises(ValueError, match="row index out of range"):
        CouplingBlock.from_triplets(0, 3, 2, [[3, 0, 1.0]])


seeds = st.integers(min_value=0, max_value=10_000)


@settings(max_examples=25, deadline=None)
@given(seeds, st.floats(min_value=-3.0, max_value=3.0))
def test_residual_is_affine(seed, alpha):
    p = generate(GeneratorSpec(seed=seed))
    r = np.random.default_rng(seed)
    x, y = r.normal(size=p.n), r.normal(size=p.n)
    lhs = residual(p, alpha * x + (1 - alpha) * y)
    rhs = alpha * residual(p, x) + (1 - alpha) * residual(p, y)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_objective_convex_along_segments(seed):
    p = generate(GeneratorSpec(seed=seed))
    r = np.random.default_rng(seed + 1)
    for _ in range(10):
        x, y = r.normal(size=p.n), r.normal(size=p.n)
        mid = objective_value(p, 0.5 * (x + y))
        assert mid <= 0.5 * (objective_value(p, x) + objective_value(p, y)) + 1e-10


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_subgradient_inequality(seed):
    p = generate(GeneratorSpec(seed=seed))
    r = np.random.default_rng(seed + 2)
    for i, f in enumerate(p.objectives):
        for _ in range(100):
            x, y = r.normal(size=f.n), r.normal(size=f.n)
            s = objective_subgradient(p, i, x)
            assert f.value(y) >= f.value(x) + s @ (y - x) - 1e-10


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=3, max_size=3))
def test_projection_is_idempotent(v):
    v = np.array(v)
    for s in (Box([-1.0, 0.0, 2.0], [1.0, 0.5, 3.0]), Ball([0.1, -0.2, 0.3], 1.5)):
        once = s.project(v)
        assert np.array_equal(s.project(once), once)
        assert s.contains(once, 1e-12)
