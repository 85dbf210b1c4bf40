import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(n, title, passed, detail)."""

    def record(n, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {title}" + (f" | {detail}" if detail else "")
        _LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
