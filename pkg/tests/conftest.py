import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line; returns the verdict so the test can assert it."""
    def record(cid, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {cid:>2}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
