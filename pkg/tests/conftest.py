import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import reporting  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not reporting.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(reporting.LINES):
        terminalreporter.write_line(reporting.LINES[number])
