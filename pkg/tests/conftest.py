import sys

import numpy as np
import pytest

from tgap import autodiff as ad
from tgap.synthetic import random_bundle


@pytest.fixture
def f64():
    prev = ad.get_dtype()
    ad.set_dtype(np.float64)
    yield
    ad.set_dtype(prev)


@pytest.fixture
def small_bundle():
    return random_bundle(num_entities=12, num_edges=30, num_relations=3, num_days=6, seed=0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
