import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and not report.failed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if report.passed else "FAIL"
    # a failure in any phase sticks
    if _RESULTS.get(number, ("PASS",))[0] != "FAIL":
        _RESULTS[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, detail = _RESULTS[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
