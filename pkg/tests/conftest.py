import numpy as np
import pytest

from lifetime_ruin.grid import GridSpec
from lifetime_ruin.market import MarketParams
from lifetime_ruin.solver import solve


@pytest.fixture(scope="session")
def params():
    return MarketParams()


@pytest.fixture(scope="session")
def default_solution(params):
    """Converged solve on the default 201 x 201 grid."""
    return solve(params, GridSpec())


@pytest.fixture(scope="session")
def small_solution(params):
    return solve(params, GridSpec(nx=51, ny=51))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
