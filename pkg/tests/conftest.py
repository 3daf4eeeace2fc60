import pytest

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        _criteria[marker.args[0]] = (marker.args[1], report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, detail = _criteria[number]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(f"{line} [{detail}]" if detail else line)
