import sys
from pathlib import Path

import numpy as np
import pytest

from tractreg.streamlines import Tractogram

sys.path.insert(0, str(Path(__file__).parent))


def random_tractogram(rng, n, p, spread=20.0, step=3.0, labels=None):
    """Random-walk streamlines with ``p`` points each."""
    base = rng.normal(0.0, spread, size=(n, 1, 3))
    walk = np.cumsum(rng.normal(0.0, step, size=(n, p, 3)), axis=1)
    return Tractogram.from_array(base + walk, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_tract():
    return random_tractogram


ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    """Record and print one acceptance line."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
