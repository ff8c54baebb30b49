from __future__ import annotations

import pytest

CRITERIA = {
    1: "histogram loss matches pair x bin enumeration",
    2: "histogram loss gradient matches finite differences",
    3: "histogram loss boundary values",
    4: "weighted BCE and balanced class weights",
    5: "step learning-rate schedule",
    6: "volume and network shape pipeline",
    7: "cohort labeling fixture",
    8: "grouped cross-validation hygiene",
    9: "ROC AUC and average precision oracles",
    10: "end-to-end CLI smoke run",
    11: "repeat run reproduces results digest",
}

_outcomes: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _outcomes.setdefault(crit, []).append(report.outcome == "passed")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        runs = _outcomes.get(n)
        status = "NOT RUN" if runs is None else ("PASS" if all(runs) else "FAIL")
        terminalreporter.write_line(f"[{status}] criterion {n:>2}: {title}")
