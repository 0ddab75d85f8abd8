import numpy as np
import pytest

from lutkit.rng import make_rng

# Acceptance tests register one line per criterion here; a terminal-summary
# hook prints them after the run.
ACCEPTANCE_RESULTS: list[str] = []


@pytest.fixture
def rng():
    return make_rng(12345)


def random_instance(rng, n, c, k, v, m):
    """Random (a, books, b) triple for a PQ problem."""
    d = c * v
    a = rng.standard_normal((n, d)).astype(np.float32)
    books = rng.standard_normal((c, k, v)).astype(np.float32)
    b = rng.standard_normal((d, m)).astype(np.float32)
    return a, books, b


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
