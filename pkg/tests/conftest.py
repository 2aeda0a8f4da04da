"""Collects acceptance-criterion outcomes and prints one verdict line per criterion."""

from __future__ import annotations

import pytest

_OUTCOMES: dict[str, list[str]] = {}
_TITLES: dict[str, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid = marker.args[0]
    _TITLES.setdefault(cid, marker.kwargs.get("title", ""))
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _OUTCOMES.setdefault(cid, []).append("skipped" if report.skipped else report.outcome)


def verdict(outcomes: list[str]) -> str:
    if "failed" in outcomes:
        return "FAIL"
    if all(o == "skipped" for o in outcomes):
        return "SKIP"
    return "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_OUTCOMES, key=lambda c: int(c[1:])):
        outcomes = _OUTCOMES[cid]
        skipped = outcomes.count("skipped")
        note = f" ({skipped} conditional check skipped)" if skipped and verdict(outcomes) == "PASS" else ""
        terminalreporter.write_line(f"{cid} {verdict(outcomes)}: {_TITLES[cid]}{note}")
