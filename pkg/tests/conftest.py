"""Shared pytest plumbing.

The acceptance suite reports one line per criterion; collecting the
lines here and emitting them from ``pytest_terminal_summary`` makes them
visible in normal (captured) runs, not only under ``-s``.
"""

import pytest

_ACCEPTANCE_LINES = {}


def _record(criterion: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    line = f"criterion {criterion}: {status} - {detail}"
    _ACCEPTANCE_LINES[criterion] = line
    print(line)


@pytest.fixture
def acceptance():
    """Recorder for acceptance-criterion outcomes: call (k, ok, detail)."""
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE_LINES):
        terminalreporter.line(_ACCEPTANCE_LINES[k])
