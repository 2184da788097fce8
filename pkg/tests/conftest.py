import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from navmarl.fixtures import grid5x5, grid_scenario, two_node, two_node_scenario  # noqa: E402


@pytest.fixture(scope="session")
def grid():
    return grid5x5()


@pytest.fixture(scope="session")
def grid_sc():
    return grid_scenario()


@pytest.fixture(scope="session")
def pair():
    return two_node()


@pytest.fixture(scope="session")
def pair_sc():
    return two_node_scenario()


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES):
            terminalreporter.write_line(line)
