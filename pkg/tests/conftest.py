import numpy as np
import pytest

from propdyn.market import MarketSpec, generate


@pytest.fixture
def crossed():
    """One seller, 2 buyers, 2 items with crossed preferences, budgets (2, 2)."""
    return MarketSpec(np.array([2.0, 2.0]), np.array([[2.0, 1.0], [1.0, 2.0]]), np.array([0, 0]))


@pytest.fixture
def crossed_twice():
    """Two sellers each owning a copy of the crossed 2x2 sub-market; buyer budgets (4, 2)."""
    v = np.array([[2.0, 1.0, 2.0, 1.0], [1.0, 2.0, 1.0, 2.0]])
    return MarketSpec(np.array([4.0, 2.0]), v, np.array([0, 0, 1, 1]))


@pytest.fixture
def symmetric():
    """Two sellers with one item each, all values 1, unit budgets."""
    return MarketSpec(np.ones(2), np.ones((2, 2)), np.array([0, 1]))


@pytest.fixture
def seed7():
    return generate(7, 3, 4, 2)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
