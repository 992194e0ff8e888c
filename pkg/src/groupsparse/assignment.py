"""Exact linear assignment over the Birkhoff polytope.

A linear objective over doubly-stochastic matrices attains its minimum at a
vertex, and the vertices are permutation matrices, so the LP reduces to the
classic assignment problem.
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Permutation, contract

BRUTE_FORCE_MAX_N = 9


@dataclass(frozen=True)
class AssignmentSolution:
    perm: Permutation
    objective: float


def _check_cost(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1] or cost.shape[0] < 1:
        raise ValueError(f"cost matrix must be square and non-empty, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    return cost


def _solution(cost: np.ndarray, perm: Permutation) -> AssignmentSolution:
    return AssignmentSolution(perm, contract(perm.to_matrix(), cost))


def solve(cost) -> AssignmentSolution:
    """Permutation ``pi`` minimising ``sum_a cost[a, pi(a)]``.

    Backed by the shortest-augmenting-path solver in scipy, which is exact
    and deterministic for a given input.
    """
    cost = _check_cost(cost)
    n = cost.shape[0]
    if n == 1:
        return _solution(cost, Permutation.identity(1))
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(n, dtype=np.int64)
    perm[rows] = cols
    return _solution(cost, Permutation(perm))


@functools.lru_cache(maxsize=None)
def _all_permutations(n: int) -> np.ndarray:
    # rows come out of itertools in lexicographic order
    table = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    table.flags.writeable = False
    return table


def brute_force_solve(cost) -> AssignmentSolution:
    """Exhaustive search; returns the lexicographically smallest optimum."""
    cost = _check_cost(cost)
    n = cost.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force limited to n <= {BRUTE_FORCE_MAX_N}, got {n}")
    table = _all_permutations(n)
    totals = cost[np.arange(n), table].sum(axis=1)
    best = int(np.argmin(totals))  # first minimum == lexicographically smallest
    return _solution(cost, Permutation(table[best]))
