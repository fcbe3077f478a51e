import numpy as np
import pytest

from stanet.tensor import default_dtype


@pytest.fixture
def f64():
    """Run the test with float64 as the default tensor dtype."""
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; printed at the end of the run."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
