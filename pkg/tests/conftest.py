import pytest

_acceptance = {}


@pytest.fixture
def measured(request):
    """Attach ``name=value`` details to an acceptance test's summary line."""
    def record(name, value):
        request.node.user_properties.append((name, value))
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    num, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        details = ", ".join(f"{k}={v}" for k, v in item.user_properties)
        _acceptance[num] = (title, status, details)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_acceptance):
        title, status, details = _acceptance[num]
        line = f"[{status}] #{num} {title}"
        terminalreporter.write_line(f"{line} ({details})" if details else line)
