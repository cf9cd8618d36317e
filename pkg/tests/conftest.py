import numpy as np
import pytest

from neutronpinn._kernels import tune_allocator

tune_allocator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, echoed after the run so they show without -s
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
