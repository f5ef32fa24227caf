import numpy as np
import pytest

from oscexp import builtin_problem, linear_problem

# acceptance verdicts, printed once at the end of the session
ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    def emit(criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def prob():
    return builtin_problem(0.05)


@pytest.fixture
def lin():
    return linear_problem(0.1, np.eye(2))
