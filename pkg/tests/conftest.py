"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""
import re

_results = {}
_CRITERION = re.compile(r"test_(A\d)_")


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    key = match.group(1)
    failed = report.failed or (report.when == "call" and hasattr(report, "wasxfail"))
    if report.when == "call" or failed:
        name = report.nodeid.split("::")[-1]
        ok, first = _results.get(key, (True, name))
        if ok and failed:
            first = name  # report the first failing test
        _results[key] = (ok and not failed, first)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_results, key=lambda k: int(k[1:])):
        ok, name = _results[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {name}")
