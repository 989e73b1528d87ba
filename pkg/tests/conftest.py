import numpy as np
import pytest

from drlattice.drbsde import ObstaclePair
from drlattice.lattice import VolatilityGrid, build_lattice

# filled by test_acceptance, printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def const(v):
    return lambda t, x: np.full(np.shape(x), float(v))


@pytest.fixture
def wide():
    return ObstaclePair(const(-1e3), const(1e3))


@pytest.fixture
def two_vol():
    grid = VolatilityGrid([0.1, 0.3])
    return build_lattice(1.0, 3, 0.0, grid), grid
