import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    failed = report.failed
    if report.when == "call" or (report.when == "setup" and failed):
        details = [v for k, v in item.user_properties if k == "detail"]
        item.config._criteria[marker.args[0]] = (marker.args[1], not failed, details)


def pytest_sessionstart(session):
    session.config._criteria = {}


def pytest_terminal_summary(terminalreporter, config):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        title, ok, details = criteria[number]
        suffix = f" ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}{suffix}")
