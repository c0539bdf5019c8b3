import numpy as np
import pytest

from protoconf.core import Modality, PrototypeSet


def random_sets(rng, n, K, d, modality, prefix):
    return [PrototypeSet(f"{prefix}{i:04d}", modality, rng.standard_normal((K, d))) for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_sets():
    def make(rng, n, K, d, modality=Modality.REPORT, prefix="c"):
        return random_sets(rng, n, K, d, modality, prefix)

    return make


_criteria: dict[str, tuple] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    info = _criteria.get(report.nodeid)
    if info is None:
        return
    number, title = info
    details = [v for k, v in report.user_properties if k == "detail"]
    _criteria[report.nodeid] = (number, title, report.outcome, details)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criteria[item.nodeid] = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    done = [v for v in _criteria.values() if len(v) == 4]
    if not done:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome, details in sorted(done, key=lambda v: (v[0], v[1])):
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        line = f"[{status}] criterion {number}: {title}"
        if details:
            line += " | " + "; ".join(details)
        terminalreporter.write_line(line)
