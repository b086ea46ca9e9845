import numpy as np
import pytest

from ucbroute.data import generate_synthetic
from ucbroute.replay import ReplayRecord
from ucbroute.reward import RewardParams, reward_matrix


def make_records(ds, n=None, seed=0, gate_rate=0.3):
    """Random-action replay records with true rewards and random gate labels."""
    n = len(ds) if n is None else n
    rng = np.random.default_rng(seed)
    R = reward_matrix(ds, RewardParams())
    acts = rng.integers(ds.header.K, size=n)
    gates = (rng.random(n) < gate_rate).astype(int)
    return [ReplayRecord(ds.context(i), int(acts[i]), float(R[i, acts[i]]), int(gates[i])) for i in range(n)]


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_synthetic(5, 40, 3, 3, 6)


@pytest.fixture
def tiny_records(tiny_ds):
    return make_records(tiny_ds, 5, seed=1)


def pytest_terminal_summary(terminalreporter):
    from verdicts import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
