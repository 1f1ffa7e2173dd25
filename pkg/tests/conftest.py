import sys

import numpy as np
import pytest

from adal.generate import GeneratorSpec, canonical_problem, generate
from adal.oracle import solve_centralized


@pytest.fixture
def canonical():
    return canonical_problem()


@pytest.fixture(scope="session")
def generated_suite():
    """Twenty seeded instances with their oracle saddle points."""
    out = []
    for seed in range(20):
        p = generate(GeneratorSpec(seed=seed))
        out.append((f"seed{seed}", p, solve_centralized(p)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
