import numpy as np
import pytest
from hypothesis import settings

# derandomized so that property runs are reproducible across sessions
settings.register_profile("repro", derandomize=True, max_examples=40, deadline=None)
settings.load_profile("repro")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def report_line():
    """Record (and print) one summary line; all lines are repeated at the end of the run."""
    def emit(text):
        print(text)
        _ACCEPTANCE_LINES.append(text)
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
