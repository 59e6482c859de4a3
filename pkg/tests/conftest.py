import numpy as np
import pytest
from hypothesis import settings

from codag import build_codag
from codag.equilibrium import solve_convex
from codag.fixtures import TABLE_BETA, figure1_network

# fixed example sequence so every run checks the same cases
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")

# acceptance lines collected by test_acceptance.py, echoed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fig1():
    return build_codag(figure1_network())


@pytest.fixture(scope="session")
def fig1_eq(fig1):
    res = solve_convex(fig1, TABLE_BETA)
    assert res.converged
    return res


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
