"""Shared pytest plumbing: the acceptance-criteria summary section."""

_criteria = {}


def record_criterion(num, ok, detail):
    """Log one acceptance criterion's outcome for the end-of-run summary."""
    _criteria[num] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        ok, detail = _criteria[num]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} [{status}] {detail}")
