import numpy as np
import pytest
import torch

from flowsynth import toydata


@pytest.fixture(autouse=True)
def single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def source():
    return toydata.make_source("s000", 48, 64, seed=7)


@pytest.fixture
def textured(rng):
    return toydata.textured_image(40, 48, rng, smooth=0.0)


# one PASS/FAIL line per acceptance criterion, printed after the run
_criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = getattr(getattr(item, "function", None), "criterion", None)
    if name is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _criteria.append((name, rep.passed, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, duration in _criteria:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  ({duration:.1f}s)")
