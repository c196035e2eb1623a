import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and fail the test if needed."""
    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
        _VERDICTS[number] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
