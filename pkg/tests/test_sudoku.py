import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from asyncthink.tasks.sudoku import parse_grid, verify_sudoku4

CANON = [(1, 2, 3, 4), (3, 4, 1, 2), (2, 1, 4, 3), (4, 3, 2, 1)]


def _all_solutions():
    rows = list(itertools.permutations((1, 2, 3, 4)))
    out = set()
    for g in itertools.product(rows, repeat=4):
        cols_ok = all(len({g[r][c] for r in range(4)}) == 4 for c in range(4))
        boxes_ok = all(len({g[br + i][bc + j] for i in (0, 1) for j in (0, 1)}) == 4 for br in (0, 2) for bc in (0, 2))
        if cols_ok and boxes_ok:
            out.add(g)
    return out


SOLUTIONS = _all_solutions()


def test_solution_count():
    assert len(SOLUTIONS) == 288
    assert all(verify_sudoku4(g)[0] for g in SOLUTIONS)


def test_examples():
    assert verify_sudoku4(CANON) == (True, "ok")
    clue = [[2, 0, 0, 0]] + [[0] * 4] * 3
    ok, reason = verify_sudoku4(CANON, clue)
    assert not ok and "clue" in reason
    assert verify_sudoku4(CANON, [[1, None, None, None]] + [[None] * 4] * 3)[0]
    box_dup = [(1, 2, 3, 4), (2, 1, 4, 3), (3, 4, 1, 2), (4, 3, 2, 1)]
    ok, reason = verify_sudoku4(box_dup)
    assert not ok and "box" in reason
    assert not verify_sudoku4([(1, 2, 3, 5)] + CANON[1:])[0]
    assert not verify_sudoku4(CANON[:3])[0]


@given(st.lists(st.integers(1, 4), min_size=16, max_size=16))
def test_agrees_with_enumeration(cells):
    grid = tuple(tuple(cells[i : i + 4]) for i in range(0, 16, 4))
    assert verify_sudoku4(grid)[0] == (grid in SOLUTIONS)


def test_parse_grid():
    assert parse_grid("1234\n3412\n2143\n4321") == [list(r) for r in CANON]
    assert parse_grid("1 . . 4 / 0 0 0 0 / .... / ....")[0] == [1, 0, 0, 4]
    with pytest.raises(ValueError):
        parse_grid("123")
