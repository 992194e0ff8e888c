import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from groupsparse.assignment import BRUTE_FORCE_MAX_N, brute_force_solve, solve
from oracles import assignment_min


def test_small_examples():
    cost = np.array([[4.0, 1.0], [2.0, 8.0]])
    sol = solve(cost)
    assert sol.perm.tolist() == [1, 0]
    assert sol.objective == 3.0
    assert solve(np.array([[5.0]])).objective == 5.0


def test_objective_is_contraction_with_permutation_matrix():
    cost = np.random.default_rng(0).random((6, 6))
    sol = solve(cost)
    assert sol.objective == pytest.approx(cost[np.arange(6), sol.perm.map].sum(), rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: arrays(np.float64, (n, n), elements=st.integers(0, 99))))
def test_brute_force_matches_itertools(cost):
    assert brute_force_solve(cost).objective == assignment_min(cost)
    assert solve(cost).objective == assignment_min(cost)


def test_ties_resolve_to_a_minimum():
    cost = np.zeros((4, 4))
    assert solve(cost).objective == 0
    assert brute_force_solve(cost).perm.is_identity()


def test_rejects_bad_costs():
    for bad in (np.zeros((2, 3)), np.zeros((0, 0)), np.array([[np.inf, 0], [0, 0]])):
        with pytest.raises(ValueError):
            solve(bad)
        with pytest.raises(ValueError):
            brute_force_solve(bad)
    with pytest.raises(ValueError):
        brute_force_solve(np.zeros((BRUTE_FORCE_MAX_N + 1,) * 2))
