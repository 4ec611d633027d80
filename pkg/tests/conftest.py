import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import LOG  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not LOG:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(LOG.values()):
        terminalreporter.write_line(line)
