import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (title, outcomes seen)
_criteria: dict[int, tuple[str, list[bool]]] = {}


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    _, seen = _criteria.setdefault(number, (title, []))
    if report.when == "call" or report.failed:
        seen.append(report.passed and not report.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, seen = _criteria[number]
        ok = bool(seen) and all(seen)
        terminalreporter.write_line(f"criterion {number:2d}  {'PASS' if ok else 'FAIL'}  {title}")
