def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdicts, one line per criterion, after the test run."""
    from tests.test_acceptance import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT):
            terminalreporter.write_line(line)
