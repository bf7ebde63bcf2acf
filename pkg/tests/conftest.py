import pytest

_LINES = {}


@pytest.fixture
def report():
    """report(criterion, passed, detail) records one summary line per criterion."""

    def record(criterion: int, passed: bool, detail: str = ""):
        _LINES[criterion] = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_LINES):
        terminalreporter.write_line(_LINES[k])
