import pytest

# lines appended by the acceptance suite, echoed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    def add(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
