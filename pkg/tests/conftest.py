import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

# criterion number -> (title, outcomes, detail lines)
_CRITERIA: dict[int, tuple[str, list[str], list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return None if mark is None else (mark.args[0], mark.args[1])


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance summary line of this test's criterion."""
    crit = _criterion(request.node)

    def add(text: str) -> None:
        if crit is not None:
            _CRITERIA.setdefault(crit[0], (crit[1], [], []))[2].append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    crit = _criterion(item)
    if crit is None:
        return
    entry = _CRITERIA.setdefault(crit[0], (crit[1], [], []))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry[1].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes, details = _CRITERIA[number]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        else:
            status = "SKIPPED"
        line = f"criterion {number:>2} {status:<7} {title}"
        if details:
            line += " | " + "; ".join(details)
        terminalreporter.write_line(line)
