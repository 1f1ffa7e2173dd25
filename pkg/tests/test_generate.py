import numpy as np

from adal.generate import GeneratorSpec, generate
from adal.io import dumps_problem
from adal.problem import Ball, residual, validate


def test_same_seed_same_bytes():
    assert dumps_problem(generate(GeneratorSpec(seed=7, N=4))) == dumps_problem(generate(GeneratorSpec(seed=7, N=4)))
    assert dumps_problem(generate(GeneratorSpec(seed=7))) != dumps_problem(generate(GeneratorSpec(seed=8)))


def test_instances_are_valid_and_in_range():
    for seed in range(40):
        p = generate(GeneratorSpec(seed=seed))
        assert validate(p).ok, seed
        assert 2 <= p.N <= 5 and 1 <= p.m <= 6
        assert all(1 <= n <= 4 for n in p.dims)
        assert all(p.support(i).size for i in range(p.N))


def test_instances_are_feasible(generated_suite):
    for name, p, sp in generated_suite:
        assert np.linalg.norm(residual(p, sp.x_star)) <= 1e-8, name
        for s, xi in zip(p.sets, p.split(sp.x_star)):
            assert s.contains(xi, 1e-12), name


def test_ball_fraction_extremes():
    assert not any(isinstance(s, Ball) for s in generate(GeneratorSpec(seed=3, ball_fraction=0.0)).sets)
    assert all(isinstance(s, Ball) for s in generate(GeneratorSpec(seed=3, ball_fraction=1.0)).sets)
