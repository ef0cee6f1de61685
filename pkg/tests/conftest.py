import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

import _acceptance_report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_report.LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in _acceptance_report.LINES:
            terminalreporter.write_line(line)
