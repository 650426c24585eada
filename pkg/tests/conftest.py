import numpy as np
import pytest

from losstomo.observation import ObservationMatrix
from losstomo.statistics import SubsetStats, _pack
from losstomo.topology import binary_tree, star_tree

_ACCEPTANCE_LINES: list[str] = []


def stats_from_columns(columns, node=1):
    """SubsetStats for a node whose children are leaves 2, 3, ... with the given 0/1 columns."""
    cols = [np.asarray(c, dtype=bool) for c in columns]
    n = len(cols[0])
    kids = tuple(range(2, 2 + len(cols)))
    return SubsetStats(node, kids, n, {j: _pack(c) for j, c in zip(kids, cols)})


def stats_from_counts(n, a, b, union):
    """Two-child stats with n_a = a, n_b = b and n_k = union (overlap a + b - union)."""
    first = np.zeros(n, dtype=bool)
    first[:a] = True
    second = np.zeros(n, dtype=bool)
    second[union - b : union] = True
    return stats_from_columns([first, second])


def obs_for_star(columns):
    """Observation on a star tree whose leaves 2.. carry the given columns."""
    y = np.column_stack([np.asarray(c, dtype=bool) for c in columns])
    return ObservationMatrix(tuple(range(2, 2 + y.shape[1])), y)


@pytest.fixture
def table2_tree():
    return star_tree(0.01, [0.01] * 8)


@pytest.fixture
def fig1_tree():
    return binary_tree(3, 0.01)


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
