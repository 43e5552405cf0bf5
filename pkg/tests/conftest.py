"""Collects one verdict line per acceptance criterion and prints them at the end."""

VERDICTS: list = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(VERDICTS):
        terminalreporter.write_line(line)
