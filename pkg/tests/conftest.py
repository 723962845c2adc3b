"""Echo the acceptance criterion verdicts after the run.

Pytest captures stdout of passing tests, so the one-line PASS/FAIL verdicts
printed by tests/test_acceptance.py would otherwise only surface on failure.
"""
import sys


def pytest_terminal_summary(terminalreporter):
    for name in ("tests.test_acceptance", "test_acceptance"):
        mod = sys.modules.get(name)
        if mod is not None and getattr(mod, "CRITERION_LINES", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.CRITERION_LINES:
                terminalreporter.write_line(line)
            break
