import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[int, list[tuple[str, str]]] = {}
# non-gating criteria can report a status of their own via record_property("criterion_status", ...)
_notes: dict[int, str] = {}


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    number = getattr(report, "criterion", None)
    if number is not None:
        _criteria.setdefault(number, []).append((report.nodeid, report.outcome))
        for key, value in report.user_properties:
            if key == "criterion_status":
                _notes[number] = value


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report.criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        outcomes = [o for _, o in _criteria[number]]
        if any(o == "failed" for o in outcomes):
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        elif number in _notes:
            status = _notes[number]
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {number:2d}: {status} ({len(outcomes)} checks)")
