"""Shared fixtures and the acceptance summary printed at the end of a run."""
import pytest

ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store one acceptance verdict; several sub-checks under one id are AND-ed."""
    prev = ACCEPTANCE.get(criterion)
    if prev is not None:
        passed = prev[0] and passed
        detail = prev[1] + "; " + detail
    ACCEPTANCE[criterion] = (bool(passed), detail)


@pytest.fixture
def acceptance():
    return record


def _order(key):
    head = key.split(" ", 1)[0].rstrip(".")
    digits = "".join(c for c in head if c.isdigit())
    return (int(digits) if digits else 99, key)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=_order):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {key}: {detail}")
