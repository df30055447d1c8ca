"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_results: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        prev = _results.get(number, ("PASS", title))[0]
        status = "FAIL" if failed or prev == "FAIL" else "PASS"
        _results[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title = _results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
