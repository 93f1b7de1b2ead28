"""Collects one result line per acceptance criterion and prints them at the end of the run."""

ACCEPTANCE = {}


def record(criterion, passed: bool, detail: str) -> bool:
    ACCEPTANCE[str(criterion)] = (passed, detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0]), k)):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
