import numpy as np
import pytest

from emit.data import LabeledSequence, make_sequence
from emit.numerics import default_dtype


@pytest.fixture(autouse=True)
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def small_sequence():
    # feature 0 at t=0,1,3 with values 1,3,3; feature 1 once
    return make_sequence("toy", [0.0, 0.5, 1.0, 3.0], [1.0, 7.0, 3.0, 3.0], [0, 1, 0, 0])


def random_labeled(rng, n_seq=12, n_features=3, max_obs=9, prefix="r"):
    out = []
    for j in range(n_seq):
        n = int(rng.integers(2, max_obs + 1))
        seq = make_sequence(f"{prefix}{j}", rng.uniform(0, 10, n), rng.normal(size=n),
                            rng.integers(0, n_features, n))
        out.append(LabeledSequence(seq, int(j % 2)))
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
