import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("hd3d", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "hd3d"))


@pytest.fixture(scope="session")
def small_phantoms():
    from hd3d.phantom import PhantomConfig, generate
    return [generate(PhantomConfig(dims=(32, 32, 32), seed=s), f"p{s}") for s in range(3)]


@pytest.fixture
def rng():
    from hd3d.rng import Rng
    return Rng(1234, "tests")


def allclose_rel(a, b, rtol):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-30)
    return np.abs(a - b).max() / scale <= rtol


# -- acceptance summary ------------------------------------------------------

_criteria_key = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_criteria_key] = {}


class _Criteria:
    def __init__(self, store, terminal):
        self.store = store
        self.terminal = terminal

    def record(self, n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        self.store[n] = line
        if self.terminal is not None:
            self.terminal.write_line(line)
        return ok


@pytest.fixture
def criteria(request):
    return _Criteria(request.config.stash[_criteria_key],
                     request.config.pluginmanager.get_plugin("terminalreporter"))


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_criteria_key, {})
    if store:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(store, key=lambda k: (len(str(k)), str(k))):
            terminalreporter.write_line(store[k])
