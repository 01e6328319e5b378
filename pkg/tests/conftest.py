"""Shared pytest plumbing.

The end-to-end battery in test_acceptance.py records a one-line verdict
per check; echoing them in a terminal section after the run turns the
suite output into a readable checklist even when capture is on.
"""

VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("end-to-end verdicts")
        for line in VERDICTS:
            terminalreporter.write_line(line)
