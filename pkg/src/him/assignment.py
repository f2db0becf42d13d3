"""Rectangular linear assignment by shortest augmenting paths.

This is the Jonker-Volgenant style successive-shortest-path method (one
Dijkstra-like search per row with dual potentials). Rows are assigned to
distinct columns; matrices with more rows than columns are transposed.
"""

from __future__ import annotations

import numpy as np


def linear_sum_assignment(cost) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment.

    Returns ``(rows, cols)`` sorted by row, with ``min(n_rows, n_cols)`` pairs.
    Ties are resolved toward the lowest column index, then toward free columns,
    so the result is a deterministic function of the input.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if cost.shape[0] > cost.shape[1]:
        cols, rows = _solve(cost.T)
        order = np.argsort(rows, kind="stable")
        return rows[order], cols[order]
    return _solve(cost)


def _solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)

    for cur in range(nr):
        shortest = np.full(nc, np.inf)
        path = np.full(nc, -1, dtype=np.int64)
        scanned_rows = np.zeros(nr, dtype=bool)
        scanned_cols = np.zeros(nc, dtype=bool)
        min_val = 0.0
        i = cur
        sink = -1
        while sink < 0:
            scanned_rows[i] = True
            remaining = ~scanned_cols
            reduced = min_val + cost[i] - u[i] - v
            better = remaining & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i
            cand = np.flatnonzero(remaining)
            vals = shortest[cand]
            lowest = vals.min()
            if not np.isfinite(lowest):
                raise ValueError("no feasible assignment")
            ties = cand[vals == lowest]
            free = ties[row4col[ties] < 0]
            j = int(free[0]) if len(free) else int(ties[0])
            min_val = lowest
            scanned_cols[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])

        u[cur] += min_val
        others = scanned_rows.copy()
        others[cur] = False
        idx = np.flatnonzero(others)
        u[idx] += min_val - shortest[col4row[idx]]
        v[scanned_cols] -= min_val - shortest[scanned_cols]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break

    return np.arange(nr, dtype=np.int64), col4row
