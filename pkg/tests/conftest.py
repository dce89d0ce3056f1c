import pytest

_LINES_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion_log(request):
    """Append a one-line verdict shown in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES_KEY, [])
    return lines.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
