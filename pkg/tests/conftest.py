import time

import numpy as np
import pytest

from fedscope import synthdata as sd
from fedscope.experiment import ExperimentConfig, execute, prepare_data

# Seed at which the default desk configuration is recorded.
DESK_SEED = 0

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = getattr(report, "_criterion", None)
    if crit is None:
        return
    prev = _criteria.get(crit, "PASS")
    _criteria[crit] = "PASS" if prev == "PASS" and report.outcome == "passed" else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep._criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), status in sorted(_criteria.items()):
        terminalreporter.write_line(f"C{n:<2} {status}  {title}")


@pytest.fixture(scope="session")
def desk_config():
    return ExperimentConfig(seed=DESK_SEED)


@pytest.fixture(scope="session")
def desk_data(desk_config):
    return prepare_data(desk_config)


@pytest.fixture(scope="session")
def desk_run(desk_config):
    """Full default desk experiment: FedAvg, 10 clients, 30 rounds, 5 epochs.

    The wall time, data generation included, is kept on ``elapsed_s``.
    """
    t0 = time.perf_counter()
    out = execute(desk_config)
    out.elapsed_s = time.perf_counter() - t0
    return out


@pytest.fixture
def small_spec():
    return sd.DatasetSpec(diseases=(2, 3), samples_per_class=20, side=6, seed=7)


@pytest.fixture
def small_dataset(small_spec):
    return sd.generate(small_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
