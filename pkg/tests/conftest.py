from __future__ import annotations

import pytest

_REPORT: list[str] = []


@pytest.fixture
def report():
    """Record a one-line pass/fail verdict, echoed again in the terminal summary."""

    def _report(name: str, passed: bool, detail: str = "") -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        print(line)
        _REPORT.append(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in _REPORT:
            terminalreporter.write_line(line)
