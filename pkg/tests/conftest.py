"""Shared pytest plumbing.

The acceptance module registers one summary line per shipping criterion;
echoing them from the terminal-summary hook keeps them visible even though
pytest captures test output at the file-descriptor level.
"""

acceptance_log = []
_failed = []


def pytest_runtest_logreport(report):
    if report.failed and "test_acceptance" in report.nodeid:
        _failed.append(report.nodeid.split("::")[-1])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance_log and not _failed:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log:
        terminalreporter.write_line(line)
    for name in _failed:
        num = name.split("_")[1]
        terminalreporter.write_line(
            f"[acceptance {int(num):2d}] FAIL {name}: see failure detail above")
