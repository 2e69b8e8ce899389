"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        detail = dict(item.user_properties).get("measured", "")
        if report.outcome != "passed":
            detail = f"{item.name} {report.outcome}"
        prev = _RESULTS.get(number)
        passed = report.outcome == "passed" and (prev is None or prev[1])
        details = (prev[2] + [detail]) if prev else [detail]
        _RESULTS[number] = (title, passed, [d for d in details if d])


@pytest.fixture
def measured(record_property):
    """Record the measured quantity shown on the criterion summary line."""
    return lambda text: record_property("measured", text)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail = _RESULTS[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{'; '.join(detail)}]" if detail else ""))
