import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("diskill", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("diskill")

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    label, text = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.outcome == "passed" else ("SKIP" if rep.outcome == "skipped" else "FAIL")
        detail = getattr(item, "criterion_detail", "")
        _CRITERIA[label] = (status, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: (int("".join(c for c in s if c.isdigit()) or 0), s)):
        status, text, detail = _CRITERIA[label]
        line = f"criterion {label:<3} {status}  {text}"
        if detail:
            line += f"  [{detail}]"
        tr.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
