"""Shared pytest hooks.

The acceptance tests record one result line per criterion; echo them in the
terminal summary so they are visible even when output capture is on.
"""
import sys


def pytest_terminal_summary(terminalreporter):
    mod = (sys.modules.get("test_acceptance")
           or sys.modules.get("tests.test_acceptance"))
    lines = getattr(mod, "CRITERION_LINES", []) if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
