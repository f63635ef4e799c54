import numpy as np
import pytest

from mobilecaps.autodiff import Parameter, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param64(rng, shape, lo=-1.0, hi=1.0, name="p"):
    return Parameter(rng.uniform(lo, hi, size=shape), name=name, dtype=np.float64)


def const64(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance_results", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results.values():
            terminalreporter.write_line(line)
