import pytest

# filled by the acceptance suite; echoed at the end of the run so the
# verdict lines are visible even when output capture is on
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records and prints one pass/fail line, then asserts."""

    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record
