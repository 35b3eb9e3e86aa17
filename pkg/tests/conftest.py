import numpy as np
import pytest

from bangbang.mesh import build_uniform_mesh
from bangbang.problems import build_manufactured

ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cubic():
    return build_manufactured("cubic", 1.0, (0.0, 1.0))


@pytest.fixture(scope="session")
def linear():
    return build_manufactured("linear", 1.0, (0.0, 1.0))


@pytest.fixture(scope="session")
def mesh16():
    return build_uniform_mesh(16)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
