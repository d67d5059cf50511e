"""Batch assignment of waiting requests to idle drivers.

Both matchers consume a pickup travel-time cost matrix whose rows are
requests in arrival order and whose columns are candidate drivers. The
optimal matcher solves the rectangular assignment problem exactly by
padding to a square matrix with a sentinel cost strictly dominating any
real entry, running the potentials/augmenting-path algorithm, and dropping
pairs that involve padding. The greedy matcher assigns each request in
arrival order to the nearest still-free driver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Assignment:
    """Matched (request_row, driver_col) pairs and their summed cost."""

    pairs: tuple[tuple[int, int], ...]
    total_cost_s: float

    @property
    def n_matched(self) -> int:
        return len(self.pairs)


def _validate_cost(cost) -> np.ndarray:
    mat = np.asarray(cost, dtype=float)
    if mat.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if mat.size and (not np.all(np.isfinite(mat)) or np.any(mat < 0)):
        raise ValueError("cost entries must be finite and non-negative")
    return mat


def _hungarian_square(cost: np.ndarray) -> np.ndarray:
    """Column index assigned to each row of a square cost matrix.

    Potentials + shortest augmenting paths; ties resolve toward the lowest
    column index, so results are deterministic.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_row = np.zeros(n + 1, dtype=np.int64)  # row matched to column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_row[j0]
            free = np.nonzero(~used[1:])[0] + 1
            cur = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            minv[free] = np.where(better, cur, minv[free])
            way[free] = np.where(better, j0, way[free])
            k = int(np.argmin(minv[free]))
            delta = minv[free][k]
            j1 = int(free[k])
            used_cols = np.nonzero(used)[0]
            u[match_row[used_cols]] += delta
            v[used_cols] -= delta
            minv[free] -= delta
            j0 = j1
            if match_row[j0] == 0:
                break
        while j0 != 0:
            j1 = int(way[j0])
            match_row[j0] = match_row[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[match_row[j] - 1] = j - 1
    return col_of_row


def hungarian_match(cost) -> Assignment:
    """Minimum-total-cost assignment of requests (rows) to drivers (cols).

    Rectangular inputs are padded to square with a sentinel of 10x the
    largest real cost plus one; padded pairs are excluded from the result,
    so min(n_rows, n_cols) pairs come back.
    """
    mat = _validate_cost(cost)
    n, m = mat.shape
    if n == 0 or m == 0:
        return Assignment(pairs=(), total_cost_s=0.0)
    size = max(n, m)
    sentinel = 10.0 * (float(mat.max()) + 1.0) if mat.size else 10.0
    square = np.full((size, size), sentinel)
    square[:n, :m] = mat
    col_of_row = _hungarian_square(square)
    pairs = tuple(
        (i, int(col_of_row[i]))
        for i in range(n)
        if int(col_of_row[i]) < m
    )
    total = float(sum(mat[i, j] for i, j in pairs))
    return Assignment(pairs=pairs, total_cost_s=total)


def greedy_match(cost) -> Assignment:
    """Arrival-order nearest-free-driver assignment.

    Each row takes its cheapest still-unassigned column; ties resolve to the
    lowest column index. Rows beyond the number of columns stay unmatched.
    """
    mat = _validate_cost(cost)
    n, m = mat.shape
    if n == 0 or m == 0:
        return Assignment(pairs=(), total_cost_s=0.0)
    free = np.ones(m, dtype=bool)
    pairs: list[tuple[int, int]] = []
    total = 0.0
    for i in range(n):
        if not free.any():
            break
        row = np.where(free, mat[i], np.inf)
        j = int(np.argmin(row))
        pairs.append((i, j))
        total += float(mat[i, j])
        free[j] = False
    return Assignment(pairs=tuple(pairs), total_cost_s=total)
