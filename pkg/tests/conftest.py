import numpy as np
import pytest

import oracles


@pytest.fixture(scope="session")
def mixture_flow():
    """Velocity MLP trained on the 8-mode ring mixture (shared by unit and acceptance tests)."""
    return oracles.train_mixture_flow(steps=3000, batch=256, lr=2e-3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
