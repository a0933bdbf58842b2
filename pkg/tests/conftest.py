import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    measured = "; ".join(str(v) for k, v in rep.user_properties if k == "measured")
    prev = _CRITERIA.get(number)
    ok = rep.passed and (prev is None or prev[0])
    parts = [m for m in ((prev[2] if prev else ""), measured) if m]
    _CRITERIA[number] = (ok, title, "; ".join(parts))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, measured = _CRITERIA[number]
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
        if measured:
            line += f" [{measured}]"
        terminalreporter.write_line(line)
