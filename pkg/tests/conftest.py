"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""
import pytest

_outcomes: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when != "call" and not report.failed and not report.skipped:
        return
    number, title = marker.args
    entry = _outcomes.setdefault(number, dict(title=title, ok=True, ran=False, details=[]))
    entry["ran"] = True
    if report.failed or report.skipped:
        entry["ok"] = False
    entry["details"] += [v for k, v in report.user_properties if k == "detail"]
    if report.failed and report.when == "call":
        entry["details"].append(f"{item.name}: {report.longrepr.reprcrash.message.splitlines()[0]}"
                                if hasattr(report.longrepr, "reprcrash") else f"{item.name}: failed")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        e = _outcomes[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {e['title']}")
        for d in dict.fromkeys(e["details"]):
            terminalreporter.write_line(f"       {d}")
