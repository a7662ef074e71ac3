import numpy as np
import pytest

from exitcontrol import geometry as G
from exitcontrol import model as M


def zero(t, x):
    return np.zeros(x.shape[0])


def brownian_model(sigma: float = 1.0, drift: float = 0.0, ell: float = 1.0) -> M.SdeModel:
    return M.SdeModel(
        1, 1, 1,
        drift=lambda t, x, a: np.full(x.shape, drift),
        diffusion=lambda t, x, a: np.full((x.shape[0], 1, 1), sigma),
        running_cost=lambda t, x, a: np.full(x.shape[0], ell),
        terminal_cost=zero,
        name="brownian",
    )


@pytest.fixture(scope="session")
def deterministic():
    return M.builtin_scenario("example41_deterministic")


@pytest.fixture(scope="session")
def stochastic():
    return M.builtin_scenario("example41_stochastic")


@pytest.fixture
def unit_interval_domain():
    return G.SpaceTimeDomain(G.interval(-1.0, 1.0), 2.0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
