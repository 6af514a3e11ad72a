"""Collects acceptance-criterion outcomes and prints one line per criterion at the end of the run."""

_CRITERIA = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[props["criterion"]] = (report.outcome, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        outcome, title, detail = _CRITERIA[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        line = f"criterion {number} [{verdict}] {title}"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)
