"""Minimum-cost bipartite assignment (Kuhn-Munkres with dual potentials)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tevit.core.errors import ContractError


@dataclass
class Assignment:
    """Injective (row, col) pairs plus the rows left without a partner."""

    pairs: list[tuple[int, int]]
    unmatched_rows: list[int] = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def rows(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def cols(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pairs)


def _solve_square(c: np.ndarray) -> np.ndarray:
    """Return ``col_of_row`` for an n x n cost matrix, O(n^3).

    Shortest augmenting paths over reduced costs; ties resolve to the lowest
    column index because ``argmin`` returns the first minimum.
    """
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=np.int64)  # 1-based row index, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    # pad with a dummy row/column at index 0 so the classic 1-based recurrences apply
    cost = np.zeros((n + 1, n + 1))
    cost[1:, 1:] = c
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            free = ~used
            free[0] = False
            cur = cost[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[row_of_col[j] - 1] = j - 1
    return col_of_row


def hungarian(cost) -> Assignment:
    """Minimise total cost over one-to-one row/column pairings.

    Rectangular inputs are padded to square with a constant sentinel larger
    than every entry; pairs touching padding are dropped, so exactly
    ``min(n, m)`` pairs come back.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Assignment([], list(range(n)), 0.0)
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    k = max(n, m)
    sentinel = float(cost.max()) + 1.0
    square = np.full((k, k), sentinel)
    square[:n, :m] = cost
    col_of_row = _solve_square(square)
    pairs = [(i, int(col_of_row[i])) for i in range(n) if col_of_row[i] < m]
    matched = {i for i, _ in pairs}
    total = float(sum(cost[i, j] for i, j in pairs))
    return Assignment(pairs, [i for i in range(n) if i not in matched], total)
