import math

import numpy as np
import pytest

from uapic.fields import make_field

X0 = np.array([1.0 / 3.0, -0.5, math.sqrt(math.pi) / 2.0])
V0 = np.array([0.5, math.e / 4.0, -1.0 / 3.0])


@pytest.fixture(scope="session")
def ex1():
    return make_field("example1")


@pytest.fixture(scope="session")
def ex2():
    return make_field("example2")


@pytest.fixture
def x0():
    return X0.copy()


@pytest.fixture
def v0():
    return V0.copy()


_CRITERIA = {}


@pytest.fixture
def record_criterion():
    """Store a one-line verdict for an acceptance criterion."""
    def record(number, ok, detail):
        _CRITERIA[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
