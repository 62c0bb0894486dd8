import pytest

_CRITERIA: list[str] = []


def format_criterion(number: int, name: str, ok: bool, detail: str) -> str:
    return f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name} -- {detail}"


@pytest.fixture
def record_criterion():
    """Log one pass/fail line per acceptance criterion; the lines are repeated in the terminal summary."""
    def record(number, name, ok, detail):
        line = format_criterion(number, name, ok, detail)
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
