import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def acceptance_log(request):
    """Append ``(criterion, passed, detail)`` lines printed in the terminal summary.

    ``passed=None`` marks an informational line.
    """
    lines = request.config.stash[_LINES_KEY]

    def log(criterion, passed, detail):
        tag = "INFO" if passed is None else "PASS" if passed else "FAIL"
        lines.append(f"[{tag}] criterion {criterion}: {detail}")
        return passed

    return log


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split("criterion ")[1]):
            terminalreporter.write_line(line)
