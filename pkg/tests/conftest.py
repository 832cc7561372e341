import pytest

#: one "PASS/FAIL <criterion>: ..." line per acceptance criterion, in run order
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record and print an acceptance line, then hand back the boolean."""
    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
