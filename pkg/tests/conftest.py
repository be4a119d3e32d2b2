import numpy as np
import pytest

from helpers import ckpt


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def worked_example():
    """Zero base and the two 4-element task vectors used throughout the docs."""
    base = ckpt(w=np.zeros(4))
    m1 = ckpt(w=[2, -1, 0.5, 3])
    m2 = ckpt(w=[1, 1, -2, -3])
    return base, m1, m2


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda ln: int(ln.split("]")[0].split("[")[1])):
            terminalreporter.write_line(line)
