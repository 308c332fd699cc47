import re

import pytest

CRITERIA = {
    1: "masking exactness",
    2: "loss range and end-to-end gradients",
    3: "momentum and stop-gradient contracts",
    4: "degenerate zero-loss chain",
    5: "metric oracles",
    6: "decoder parameter counts",
    7: "positional embedding table",
    8: "tabular agent oracles",
    9: "directional learning benefit",
    10: "ablation reachability",
    11: "reproducibility and resume",
}

_outcomes = {}
_notes = {}


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the criterion of the calling test."""
    n = _criterion(request.node.nodeid)

    def add(text):
        _notes.setdefault(n, []).append(text)
    return add


def _criterion(nodeid):
    m = re.search(r"test_criterion_(\d+)", nodeid)
    return int(m.group(1)) if m else None


def pytest_runtest_logreport(report):
    n = _criterion(report.nodeid)
    if n is None:
        return
    if report.failed:
        _outcomes[n] = False
    elif report.when == "call":
        _outcomes.setdefault(n, True)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if _outcomes[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {CRITERIA[n]}")
        for text in _notes.get(n, []):
            terminalreporter.write_line(f"    {text}")
