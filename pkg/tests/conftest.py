import pytest

# one "PASS/FAIL [n] ..." line per acceptance criterion, echoed at session end
ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} [{number:2d}] {name}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def record():
    return record_acceptance
