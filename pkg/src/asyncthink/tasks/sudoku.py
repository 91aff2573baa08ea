"""4x4 Sudoku checking."""

from __future__ import annotations

from typing import Sequence

Grid = Sequence[Sequence[int | None]]

_FULL = {1, 2, 3, 4}


def _groups(grid: Grid):
    for r in range(4):
        yield f"row {r}", [grid[r][c] for c in range(4)]
    for c in range(4):
        yield f"column {c}", [grid[r][c] for r in range(4)]
    for br in (0, 2):
        for bc in (0, 2):
            yield f"box ({br},{bc})", [grid[br + i][bc + j] for i in (0, 1) for j in (0, 1)]


def verify_sudoku4(grid: Grid, puzzle: Grid | None = None) -> tuple[bool, str]:
    """Check a filled grid against the Sudoku rules and, if given, the puzzle clues.

    Empty puzzle cells are ``None`` or ``0``.
    """
    if len(grid) != 4 or any(len(row) != 4 for row in grid):
        return False, "grid must be 4x4"
    for r in range(4):
        for c in range(4):
            if grid[r][c] not in _FULL:
                return False, f"cell ({r},{c}) holds {grid[r][c]!r}, expected 1-4"
    for name, cells in _groups(grid):
        if set(cells) != _FULL:
            return False, f"{name} repeats a value"
    if puzzle is not None:
        if len(puzzle) != 4 or any(len(row) != 4 for row in puzzle):
            return False, "puzzle must be 4x4"
        for r in range(4):
            for c in range(4):
                clue = puzzle[r][c]
                if clue and grid[r][c] != clue:
                    return False, f"cell ({r},{c}) is {grid[r][c]} but the clue is {clue}"
    return True, "ok"


def parse_grid(text: str) -> list[list[int]]:
    """Read 16 digits (any separators) row by row; ``.`` or ``0`` marks an empty cell."""
    cells = [0 if ch == "." else int(ch) for ch in text if ch.isdigit() or ch == "."]
    if len(cells) != 16:
        raise ValueError(f"expected 16 cells, found {len(cells)}")
    return [cells[i : i + 4] for i in range(0, 16, 4)]
