import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tevit.core.errors import ContractError
from tevit.matching import hungarian


def brute_force(cost):
    """Minimum total over every injective pairing, by exhaustive enumeration."""
    n, m = cost.shape
    best = np.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = min(best, sum(cost[i, c] for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = min(best, sum(cost[r, j] for j, r in enumerate(rows)))
    return best


def check_assignment(cost, asg):
    n, m = cost.shape
    rows, cols = asg.rows, asg.cols
    assert len(asg) == min(n, m)
    assert len(set(rows.tolist())) == len(rows) and len(set(cols.tolist())) == len(cols)
    assert sorted(asg.unmatched_rows + rows.tolist()) == list(range(n))
    return float(cost[rows, cols].sum()) if len(rows) else 0.0


def test_identity_on_diagonal_zero():
    cost = 1.0 - np.eye(5)
    asg = hungarian(cost)
    assert asg.pairs == [(i, i) for i in range(5)]
    assert check_assignment(cost, asg) == 0.0


def test_worked_three_by_three():
    cost = np.array([[4.0, 1, 3], [2, 0, 5], [3, 2, 2]])
    asg = hungarian(cost)
    assert sorted(asg.pairs) == [(0, 1), (1, 0), (2, 2)]
    assert check_assignment(cost, asg) == 5.0 == brute_force(cost)


def test_tall_matrix_cardinality():
    cost = np.random.default_rng(0).uniform(size=(5, 2))
    asg = hungarian(cost)
    assert len(asg) == 2 and len(asg.unmatched_rows) == 3


def test_non_finite_rejected():
    with pytest.raises(ContractError):
        hungarian(np.array([[1.0, np.nan], [0.0, 1.0]]))
    with pytest.raises(ContractError):
        hungarian(np.array([[1.0, np.inf]]))


def test_empty_inputs():
    assert len(hungarian(np.zeros((3, 0)))) == 0
    assert hungarian(np.zeros((3, 0))).unmatched_rows == [0, 1, 2]
    assert len(hungarian(np.zeros((0, 4)))) == 0


def test_against_brute_force_1000_matrices():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    for k in range(1000):
        n, m = rng.integers(1, 8, size=2)
        # integer costs create ties; continuous ones do not
        cost = rng.integers(0, 6, size=(n, m)).astype(float) if k % 2 else rng.normal(size=(n, m))
        total = check_assignment(cost, hungarian(cost))
        assert total == pytest.approx(brute_force(cost), abs=1e-9)
    assert time.perf_counter() - t0 < 30


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-5, 5)),
       st.integers(0, 5), st.floats(-10, 10))
def test_row_constant_invariance(cost, row, c):
    row = row % cost.shape[0]
    shifted = cost.copy()
    shifted[row] += c
    a = check_assignment(cost, hungarian(cost))
    b = check_assignment(cost, hungarian(shifted))  # evaluated under the original costs
    if cost.shape[0] <= cost.shape[1]:
        assert b == pytest.approx(a, abs=1e-9)  # every row is matched, so the optimum is unchanged
    else:
        assert a == pytest.approx(brute_force(cost), abs=1e-9)
