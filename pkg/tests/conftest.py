import numpy as np
import pytest

from qrij.data import RegressionData


@pytest.fixture
def small_data():
    rng = np.random.default_rng(11)
    n = 60
    x = rng.standard_normal(n)
    y = 1.0 + 0.5 * x + rng.standard_normal(n)
    return RegressionData(y, np.column_stack([np.ones(n), x]))


_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def _report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {detail}"
        print(line)
        _ACCEPTANCE.append((number, line))
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
