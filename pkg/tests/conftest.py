from __future__ import annotations

import pytest

_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the summary is printed at the end of the session."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
