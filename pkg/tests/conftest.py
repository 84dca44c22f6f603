import pytest

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record a criterion's outcome and fail the test when it did not pass."""

    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        if not ok:
            pytest.fail(line, pytrace=False)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s.split("criterion ")[1]):
            terminalreporter.write_line(line)
