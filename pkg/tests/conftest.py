import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion name -> (all phases passed, call phase ran)
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    ok, ran = _CRITERIA.get(marker.args[0], (True, False))
    _CRITERIA[marker.args[0]] = (ok and report.passed, ran or report.when == "call")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, ran) in _CRITERIA.items():
        terminalreporter.write_line(f"{'PASS' if ok and ran else 'FAIL'}  {name}")
