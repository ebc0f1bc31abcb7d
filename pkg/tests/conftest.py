import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Recorder for acceptance lines, printed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
