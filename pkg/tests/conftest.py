import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line; all lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
