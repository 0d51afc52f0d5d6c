from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"

# filled by test_acceptance; printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def data_dir() -> Path:
    return DATA


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: float(s.split()[1].rstrip(":").split("(")[0])):
            terminalreporter.write_line(line)
