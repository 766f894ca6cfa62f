import os

import numpy as np
import pytest

from cvxq.env import FiniteSystem, random_finite_system


def pytest_configure(config):
    # the Mountain Car reference grid is reused across tests and runs
    os.environ.setdefault("CVXQ_CACHE", os.path.join(os.path.dirname(__file__), ".cache"))


def pytest_collection_modifyitems(config, items):
    if os.environ.get("CVXQ_SLOW"):
        return
    skip = pytest.mark.skip(reason="slow experiment; set CVXQ_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def chain3():
    """0 <- 1 <- 2 with unit costs; input 1 stays put at cost 2 (0 at the goal)."""
    nxt = np.array([[0, 0], [0, 1], [1, 2]])
    cost = np.array([[0.0, 0.0], [1.0, 2.0], [1.0, 2.0]])
    return FiniteSystem(nxt, cost, (0, 0))


@pytest.fixture
def sys12():
    return random_finite_system(12, 3, seed=3)
