import pytest

# filled by tests/test_acceptance.py, printed once at the end of the run
CRITERIA: dict[int, str] = {}


def record(number: int, ok: bool, text: str):
    CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])


@pytest.fixture(scope="session")
def criteria():
    return record
