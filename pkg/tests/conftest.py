import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from car_retrieval.data import SyntheticConfig, generate_synthetic

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SyntheticConfig(n_train_paired=48, n_train_unpaired=40, n_val=24,
                                              n_test=24))


# -- acceptance summary: one pass/fail line per criterion -------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "failed": [], "ran": 0})
    if report.failed:
        entry["failed"].append(item.name)
    elif report.when == "call":
        entry["ran"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "FAIL" if entry["failed"] else "PASS"
        detail = f" (failed: {', '.join(entry['failed'])})" if entry["failed"] else ""
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}{detail}")
