"""Per-criterion pass/fail summary for tests marked ``@pytest.mark.criterion(n, title)``."""

import pytest

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            _results.setdefault(n, {"title": title, "outcomes": {}})
            _results[n]["outcomes"][item.nodeid] = None


@pytest.hookimpl(trylast=True)
def pytest_runtest_logreport(report):
    for entry in _results.values():
        if report.nodeid not in entry["outcomes"]:
            continue
        prev = entry["outcomes"][report.nodeid]
        if report.failed:
            entry["outcomes"][report.nodeid] = "failed"
        elif report.when == "call" and prev is None:
            entry["outcomes"][report.nodeid] = "skipped" if report.skipped else "passed"
        elif report.skipped and prev is None:
            entry["outcomes"][report.nodeid] = "skipped"


def pytest_terminal_summary(terminalreporter):
    ran = {n: e for n, e in _results.items() if any(v is not None for v in e["outcomes"].values())}
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ran):
        outcomes = [v for v in ran[n]["outcomes"].values() if v is not None]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(v == "passed" for v in outcomes):
            verdict = "PASS"
        else:
            verdict = "SKIP"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {ran[n]['title']}")
