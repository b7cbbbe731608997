import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from resonance_lab.action import EnergyProfile
from resonance_lab.landscape import CosineDepth, make_benchmark

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BENCH_DEPTH = CosineDepth(0.5, 0.25)


def sinusoid(s):
    return 1.0 + 0.5 * np.cos(2 * np.pi * np.asarray(s, dtype=float))


def sinusoid_pair(M=512, lag=0.5):
    em = EnergyProfile.from_function(sinusoid, M=M, basin="-")
    ep = EnergyProfile.from_function(lambda s: sinusoid(np.asarray(s) + lag), M=M, basin="+")
    return em, ep


@pytest.fixture(scope="session")
def bench1():
    return make_benchmark(1, BENCH_DEPTH, 0.5)


@pytest.fixture(scope="session")
def bench2():
    return make_benchmark(2, BENCH_DEPTH, 0.5)


@pytest.fixture(scope="session")
def static1():
    return make_benchmark(1, CosineDepth(0.5), 0.5)


@pytest.fixture(scope="session")
def profiles():
    return sinusoid_pair()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
