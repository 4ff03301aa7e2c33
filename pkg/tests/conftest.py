import numpy as np
import pytest

from pairfreeze.data import synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_synth():
    """(train, test) 2-class synthetic sets small enough for quick runs."""
    return synth_dataset(20, 2, 32, seed=0), synth_dataset(10, 2, 32, seed=1)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
