import os
from pathlib import Path

import pytest

from posfree.sweep import SweepGrid, SweepReport, run_sweep

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_sweep() -> SweepReport:
    """The full default grid, computed once per session.

    Set POSFREE_SWEEP_CACHE to a JSON path to reuse a saved report of the
    same grid across sessions (it is written there after a fresh run).
    """
    grid = SweepGrid()
    cache = os.environ.get("POSFREE_SWEEP_CACHE")
    if cache and Path(cache).exists():
        report = SweepReport.load(cache)
        if report.grid == grid:
            return report
    report = run_sweep(grid, workers=1)
    if cache:
        report.save(cache)
    return report
