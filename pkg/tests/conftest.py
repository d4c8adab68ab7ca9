"""Acceptance summary: one PASS/FAIL line per ``@pytest.mark.criterion`` test."""

import pytest

_results: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    failed = report.failed
    if report.when == "call" or failed:
        prev = _results.get(number, ("PASS", title, 0.0))
        status = "FAIL" if failed or prev[0] == "FAIL" else "PASS"
        _results[number] = (status, title, prev[2] + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title, secs = _results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}  ({secs:.2f}s)")
