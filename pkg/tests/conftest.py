"""Collects the one-line acceptance results and prints them after the run."""

_LINES: list[str] = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _LINES.extend(value for name, value in report.user_properties if name == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
