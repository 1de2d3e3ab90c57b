import pytest

_LINES = []


@pytest.fixture
def acceptance():
    """``report(number, ok, detail)``: print and collect one PASS/FAIL line."""

    def report(number, ok, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _LINES.append((number, line))

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
