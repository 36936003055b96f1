import sys

import numpy as np
import pytest

from milhard.bagdata import Bag, Dataset


def make_dataset(sizes, labels=None, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = labels if labels is not None else [i % 2 for i in range(len(sizes))]
    bags = [Bag(f"b{i}", lab, rng.standard_normal((n, dim))) for i, (n, lab) in enumerate(zip(sizes, labels))]
    return Dataset(tuple(bags), dim, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
