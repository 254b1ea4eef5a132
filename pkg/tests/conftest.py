import warnings

import pytest

from choquardlab.functional import ChoquardParams
from choquardlab.grid import make_grid
from choquardlab.solver import SolverConfig, initial_guess, solve_ground_state

P2 = ChoquardParams(3, 1.0, 2.0)


@pytest.fixture(scope="session")
def coarse_grid():
    # h = 3 keeps the p = 2 ground state accurate to ~7 digits
    return make_grid(3, 32, 48.0)


@pytest.fixture(scope="session")
def coarse_state(coarse_grid):
    """Subcritical ground state (p = 2, b = a = 1) on the coarse grid."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = solve_ground_state(initial_guess(coarse_grid, P2, width=8.0), P2, SolverConfig())
    assert res.converged
    return res


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
