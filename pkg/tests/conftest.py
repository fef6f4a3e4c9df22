"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_OUTCOMES = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        _OUTCOMES[props["criterion"]] = (report.passed, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_OUTCOMES):
        ok, title, detail = _OUTCOMES[k]
        terminalreporter.write_line(f"criterion {k} {title}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
