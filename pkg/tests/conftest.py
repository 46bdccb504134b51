import numpy as np
import pytest

from ltood import _backend
from ltood.dataset import Dataset, SubsetPartition


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run a test once per available kernel backend."""
    previous = _backend.current()
    _backend.use(request.param)
    yield request.param
    _backend.use(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_partition():
    return SubsetPartition(frozenset({0, 1}), frozenset({2, 3}), frozenset({4, 5}), 5, 50, "absolute")


@pytest.fixture
def six_class_data():
    r = np.random.default_rng(7)
    counts = [60, 55, 20, 18, 6, 5]
    labels = np.repeat(np.arange(6), counts)
    centers = r.normal(size=(6, 4)) * 3
    feats = centers[labels] + r.normal(size=(len(labels), 4))
    return Dataset(feats, labels, 6), toy_partition()


# -- acceptance verdicts ------------------------------------------------------
# Tests marked ``criterion("name")`` get one PASS/FAIL line in the terminal
# summary; details come from ``record_property("detail", ...)``.

_VERDICTS = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    failed_setup = rep.when == "setup" and not rep.passed
    if rep.when == "call" or failed_setup:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _VERDICTS.append((mark.args[0], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    width = max(len(name) for name, _, _ in _VERDICTS)
    for name, verdict, detail in _VERDICTS:
        terminalreporter.write_line(f"{verdict}  {name:<{width}}  {detail}".rstrip())
