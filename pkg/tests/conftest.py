import time

import numpy as np
import pytest

from pfastrack.config import GRID_DEFAULTS
from pfastrack.dynamics import double_int_rel, dubins_rel
from pfastrack.grid_solver import GridSpec, ValueFamily, solve_slice
from pfastrack.value_teb import GridValueSource, build_teb_table

DUBINS_BETAS = (0.5, 0.75, 0.875, 1.0, 1.25)


@pytest.fixture(scope="session")
def dubins_assets():
    """Dubins value slices on the default coarse grid, solved once per session.

    ``times`` holds the wall-clock solve time of each slice.
    """
    sys = dubins_rel()
    d = GRID_DEFAULTS["DubinsRel"]
    grid = GridSpec.for_system(sys, d["mins"], d["maxs"], d["counts"])
    slices, times = [], {}
    for b in DUBINS_BETAS:
        t0 = time.perf_counter()
        slices.append(solve_slice(sys, grid, [b, b]))
        times[b] = time.perf_counter() - t0
    family = ValueFamily(sys_name=sys.name, betas=[s.beta for s in slices], slices=slices)
    source = GridValueSource(family, sys)
    table = build_teb_table(source, 0.25)
    return {"sys": sys, "grid": grid, "family": family, "source": source, "table": table, "times": times}


@pytest.fixture(scope="session")
def di_assets():
    sys = double_int_rel()
    d = GRID_DEFAULTS["DoubleIntRel"]
    grid = GridSpec.for_system(sys, d["mins"], d["maxs"], d["counts"])
    slices = [solve_slice(sys, grid, b) for b in d["betas"]]
    family = ValueFamily(sys_name=sys.name, betas=[s.beta for s in slices], slices=slices)
    source = GridValueSource(family, sys)
    return {"sys": sys, "grid": grid, "family": family, "source": source,
            "table": build_teb_table(source, 0.25), "betas": np.array(d["betas"])}


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Keep one pass/fail line per acceptance criterion for the terminal summary."""
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
