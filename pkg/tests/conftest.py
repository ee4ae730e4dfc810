import numpy as np
import pytest

from popdyn.game import RESOURCE_COLLECTION, solve_equilibrium

# Frozen reference values, computed with 30-digit mpmath root finding on the
# balance equation sum_i x_i(q) = 1 of the three-patch game.
Q_BAR_REF = 94.10074403607389
X_STAR_REF = np.array([0.129370895222235, 0.277101436022944, 0.593527668754821])

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def equilibrium():
    return solve_equilibrium(RESOURCE_COLLECTION)


@pytest.fixture(scope="session")
def xstar(equilibrium):
    return np.asarray(equilibrium.x_star)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
