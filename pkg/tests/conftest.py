import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the acceptance summary, then assert."""
    lines = request.config.stash[_LINES_KEY]

    def record(name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
