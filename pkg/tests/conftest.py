import numpy as np
import pytest

from routenet.tensor import precision


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
CRITERIA = []


@pytest.fixture
def criterion(request):
    def record(tag, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {tag}: {detail}"
        CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
