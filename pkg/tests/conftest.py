import numpy as np
import pytest

from hypodiff.models import LinearOscillator

ACCEPTANCE_LINES = []


@pytest.fixture
def oscillator():
    return LinearOscillator()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def acceptance_report():
    """Append one ``criterion k: PASS|FAIL ...`` line for the terminal summary."""

    def record(k, ok, detail):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
