import numpy as np
import pytest

_CRITERION_LINES: list[str] = []


def record_criterion(line: str) -> None:
    """Collect a pass/fail line for the terminal summary."""
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _CRITERION_LINES:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
