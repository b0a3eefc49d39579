"""Collects outcomes of tests marked ``criterion`` and prints one line per criterion."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "seen": False, "notes": []})
    if report.when == "call" or (report.when == "setup" and report.failed):
        entry["seen"] = True
        if report.failed:
            entry["ok"] = False
            entry["notes"].append(f"{item.name} failed")
    for key, value in getattr(item, "user_properties", []):
        if key == "detail" and report.when == "call" and value not in entry["notes"]:
            entry["notes"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        e = _RESULTS[number]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        notes = f" ({'; '.join(e['notes'])})" if e["notes"] else ""
        terminalreporter.write_line(f"[{status}] criterion {number}: {e['title']}{notes}")
