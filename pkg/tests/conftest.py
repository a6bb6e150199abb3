import pytest

GATE = {}


@pytest.fixture
def gate():
    """Record one acceptance outcome: ``gate(number, ok, detail)``."""

    def record(number, ok, detail):
        GATE[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not GATE:
        return
    terminalreporter.section("acceptance gate")
    for number in sorted(GATE):
        ok, detail = GATE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
