import math

import numpy as np
import pytest

from remaging.environment import Environment, RemParams, sample_environment


def planted(log_tau, **kw):
    """Environment with prescribed log tau (N inferred from the length)."""
    log_tau = np.asarray(log_tau, dtype=float)
    N = int(round(math.log2(len(log_tau))))
    return Environment.from_log_tau(log_tau, RemParams(N=N, **kw))


@pytest.fixture(scope="session")
def env8():
    return sample_environment(RemParams(N=8, env_seed=5))


@pytest.fixture(scope="session")
def env10():
    return sample_environment(RemParams(N=10, env_seed=2))


@pytest.fixture(scope="session")
def two_state():
    # tau = (2, 0.5)
    return planted([math.log(2.0), math.log(0.5)])


def pytest_configure(config):
    np.seterr(over="raise", invalid="raise")


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
