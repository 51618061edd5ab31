"""Print one PASS/FAIL line per acceptance criterion at the end of the run."""

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, _, title = report.nodeid.split("::test_criterion_")[1].partition("_")
        _ACCEPTANCE[int(number)] = ("PASS" if report.passed else "FAIL", title.replace("_", " "))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        verdict, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}")
