import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from radarflow.synth import SceneConfig, generate_pair


_ACCEPTANCE_LINES = []


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run long experiments (hours on one core)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True, scope="session")
def single_thread_blas():
    with threadpool_limits(1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def noiseless_pair():
    return generate_pair(SceneConfig(seed=11).noiseless(), 0)


@pytest.fixture(scope="session")
def default_pair():
    return generate_pair(SceneConfig(seed=5), 0)


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion; returns the recorder."""
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
