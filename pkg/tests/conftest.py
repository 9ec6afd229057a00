import numpy as np
import pytest
import torch

from rfsep.waveforms import Intrapulse, generate_library

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion():
    """Record one pass/fail line; call with (number, title, passed, detail)."""

    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_library():
    """Four short records: two Frank, two Costas."""
    sigs = []
    for i, kind in enumerate((Intrapulse.FRANK, Intrapulse.COSTAS)):
        sigs += [s.samples for s, _ in generate_library(kind, 2, 60000, rng=7 + i)]
    return sigs


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2 * h)


def rel_err(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)
