"""Matching tests: exhaustive-permutation oracle, scipy cross-check, greedy
order semantics, and input validation."""

import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from regime_dispatch.dispatch import Assignment, greedy_match, hungarian_match


def brute_force_min_cost(cost):
    """Minimum assignment cost by enumerating all injective row->column maps
    (transposed first when there are more rows than columns)."""
    c = np.asarray(cost, dtype=float)
    if c.shape[0] > c.shape[1]:
        c = c.T
    n, m = c.shape
    best = np.inf
    for perm in itertools.permutations(range(m), n):
        total = sum(c[i, j] for i, j in enumerate(perm))
        best = min(best, total)
    return best


def greedy_reference(cost):
    """Row-order nearest-free-column matching with lowest-index ties."""
    c = np.asarray(cost, dtype=float)
    free = list(range(c.shape[1]))
    pairs = []
    for i in range(c.shape[0]):
        if not free:
            break
        j = min(free, key=lambda col: (c[i, col], col))
        pairs.append((i, j))
        free.remove(j)
    return tuple(pairs)


def test_hungarian_matches_brute_force_small():
    rng = np.random.default_rng(13)
    for _ in range(200):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 6))
        cost = rng.integers(0, 50, size=(n, m)).astype(float)
        got = hungarian_match(cost)
        assert got.total_cost_s == brute_force_min_cost(cost)
        assert len(got.pairs) == min(n, m)


def test_hungarian_matches_scipy_rectangular():
    rng = np.random.default_rng(14)
    for _ in range(100):
        n = int(rng.integers(1, 12))
        m = int(rng.integers(1, 12))
        cost = rng.uniform(0, 100, size=(n, m))
        got = hungarian_match(cost)
        rows, cols = linear_sum_assignment(cost)
        assert got.total_cost_s == pytest.approx(float(cost[rows, cols].sum()), abs=1e-9)


def test_hungarian_pairs_are_consistent():
    rng = np.random.default_rng(15)
    cost = rng.uniform(0, 10, size=(6, 9))
    got = hungarian_match(cost)
    rows = [i for i, _ in got.pairs]
    cols = [j for _, j in got.pairs]
    assert len(set(rows)) == len(rows)
    assert len(set(cols)) == len(cols)
    assert got.total_cost_s == pytest.approx(sum(cost[i, j] for i, j in got.pairs))


def test_hungarian_deterministic_ties():
    cost = np.zeros((2, 3))
    got = hungarian_match(cost)
    assert got.pairs == ((0, 0), (1, 1))
    assert got.total_cost_s == 0.0
    again = hungarian_match(cost)
    assert again.pairs == got.pairs


def test_greedy_reference_agreement():
    rng = np.random.default_rng(16)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(1, 8))
        cost = rng.uniform(0, 100, size=(n, m))
        got = greedy_match(cost)
        assert got.pairs == greedy_reference(cost)
        assert got.total_cost_s == pytest.approx(
            sum(cost[i, j] for i, j in got.pairs)
        )


def test_greedy_is_first_come_first_served():
    # row 0 takes the column even when row 1 needs it more
    cost = np.array([[1.0, 2.0], [1.0, 50.0]])
    got = greedy_match(cost)
    assert got.pairs == ((0, 0), (1, 1))
    assert got.total_cost_s == 51.0


def test_greedy_never_beats_hungarian():
    rng = np.random.default_rng(17)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 9))
        cost = rng.uniform(0, 100, size=(n, m))
        assert greedy_match(cost).total_cost_s >= hungarian_match(cost).total_cost_s - 1e-9


def test_empty_matrix():
    for shape in [(0, 0), (0, 3), (3, 0)]:
        cost = np.zeros(shape)
        for matcher in (hungarian_match, greedy_match):
            got = matcher(cost)
            assert got == Assignment((), 0.0)


def test_input_validation():
    for matcher in (hungarian_match, greedy_match):
        with pytest.raises(ValueError):
            matcher(np.array([[1.0, -2.0]]))
        with pytest.raises(ValueError):
            matcher(np.array([[1.0, np.nan]]))
        with pytest.raises(ValueError):
            matcher(np.array([[1.0, np.inf]]))
        with pytest.raises(ValueError):
            matcher(np.array([1.0, 2.0]))
