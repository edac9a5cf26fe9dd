import math

import numpy as np
import pytest


def binomial_band(p: float, n: int, k_sigma: float) -> tuple[float, float]:
    """Band for an observed fraction of n Bernoulli(p) trials."""
    s = math.sqrt(p * (1 - p) / n)
    return p - k_sigma * s, p + k_sigma * s


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
