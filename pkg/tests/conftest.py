import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; the lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(number, name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {name}" + (f" ({detail})" if detail else "")
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
