"""Shared test configuration.

Thread pinning must happen before numpy is imported anywhere in the test
process: BLAS thread pools otherwise make reductions run-order dependent
and break bit-exact determinism checks.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(num, title): top-level acceptance criterion")


_ACCEPTANCE_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when != "call":
        return
    num = marker.kwargs.get("num", marker.args[0] if marker.args else "?")
    title = marker.kwargs.get("title", item.name)
    _ACCEPTANCE_RESULTS[num] = (title, report.outcome)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE_RESULTS):
        title, outcome = _ACCEPTANCE_RESULTS[num]
        word = "PASS" if outcome == "passed" else "FAIL"
        tr.write_line(f"[{word}] criterion {num}: {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
