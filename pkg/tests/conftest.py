import numpy as np
import pytest

from hvmflow.synthetic import SceneParams, generate_synthetic

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def scene():
    return generate_synthetic(SceneParams(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
