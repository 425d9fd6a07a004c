import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rsdsolve.fem_assembly import PdeKind, assemble  # noqa: E402
from rsdsolve.grid_tree import build_grid, build_tree, compute_index_sets  # noqa: E402
from rsdsolve.rsd_solver import rsd_setup  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def make_problem(kind="poisson", P=2, N=3, **grid_kw):
    kind = PdeKind.parse(kind)
    grid = build_grid(P=P, N=N, components=kind.components, **grid_kw)
    tree = compute_index_sets(build_tree(P), grid)
    K = assemble(grid, kind)
    return grid, tree, K


def make_store(kind="poisson", P=2, N=3, gamma=2, **kw):
    grid, tree, K = make_problem(kind, P, N)
    return grid, tree, K, rsd_setup(K, tree, grid, PdeKind.parse(kind), gamma, **kw)


@pytest.fixture
def problem():
    return make_problem


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
