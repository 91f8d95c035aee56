"""Prints one line per acceptance criterion after the test summary."""

_results: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    name = props.get("criterion")
    if name is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        outcome = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _results[name] = (outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (outcome, detail) in _results.items():
        terminalreporter.write_line(f"{outcome} {name}" + (f": {detail}" if detail else ""))
