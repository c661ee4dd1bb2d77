"""Collects the acceptance PASS/FAIL lines and prints them after the run."""

import pytest

_LINES = []


@pytest.fixture
def acceptance():
    """``acceptance(number, name, passed, detail)`` records one criterion line."""
    def record(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} [{number:>2}] {name}: {detail}"
        _LINES.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES, key=lambda x: (int(str(x[0]).rstrip('ab')), str(x[0]))):
        terminalreporter.write_line(line)
