"""Prints one PASS/FAIL line per acceptance criterion at the end of a run.

Acceptance tests carry ``@pytest.mark.criterion(n)``; a criterion passes when
every test tagged with it passed, and is reported as NOT RUN when none of its
tests executed (e.g. deselected with ``-k``).
"""
from __future__ import annotations

import pytest

CRITERIA = {
    1: "gradient suite: analytic vs finite differences, score-function identity",
    2: "GRPO unit suite: advantages vs brute force, degenerate groups, surrogate table",
    3: "expert learnability: every domain reaches eval >= 0.9 within 2000 steps, 3 seeds",
    4: "drift: overlap with theta0 drops >= 0.05 and sym-KL rises in >= 80% of intervals, 3 seeds",
    5: "overlap-gain: Spearman rho > 0.5 over >= 5 students; control gain within 2 SE of 0",
    6: "co-evolution proximity: coevolve overlap > expert (3 seeds); Phase II >= Phase I in >= 80% of cycles",
    7: "consolidation: merged CoPD >= static-OPD in >= 2/3 seeds; every branch >= theta0",
    8: "ablation collapse: beta = 0 coevolve == expert bitwise; one-hot merge == branch",
    9: "determinism and formats: byte-identical reruns and 1 vs 4 workers; checkpoint round trip",
    10: "rhythm sweep: ratios 1:1, 1.5:1, 3:1 run end to end and emit the table",
}

_outcomes: dict[int, list[bool]] = {}
_criterion_of: dict[str, int] = {}
_details: dict[int, list[str]] = {}


@pytest.fixture
def record_measurement():
    """``record_measurement(n, text)`` adds measured values to criterion n's summary line."""
    def record(n: int, text: str) -> None:
        _details.setdefault(n, []).append(text)
    return record


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _criterion_of[item.nodeid] = int(mark.args[0])


def pytest_runtest_logreport(report):
    n = _criterion_of.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(n, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _criterion_of:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        status = "NOT RUN" if not results else ("PASS" if all(results) else "FAIL")
        tagged = sum(1 for c in _criterion_of.values() if c == n)
        partial = f" [{len(results)}/{tagged} tests ran]" if results and len(results) < tagged else ""
        terminalreporter.write_line(f"criterion {n:2d}: {status:7s} {title}{partial}")
        for text in _details.get(n, ()):
            terminalreporter.write_line(f"               {text}")
