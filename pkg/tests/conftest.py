import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict_log():
    """Collects one line per acceptance criterion for the terminal summary."""
    return _LINES


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
