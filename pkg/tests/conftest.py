import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line, then fail the test if the criterion failed."""

    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
