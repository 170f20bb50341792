import numpy as np
import pytest

from zofed.nn import Batch, init_params, mlp


@pytest.fixture
def small_mlp():
    spec = mlp([4, 8, 3], activation="hardswish")
    params = init_params(spec, seed=7).values
    rng = np.random.default_rng(11)
    batch = Batch(rng.normal(size=(10, 4)), rng.integers(0, 3, 10))
    return spec, params, batch


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
