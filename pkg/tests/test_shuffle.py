import numpy as np
import pytest

from groupsparse.assignment import solve
from groupsparse.core import Permutation, contract, permute_importance
from groupsparse.shuffle import input_step_cost, is_groupable, optimize_permutations, output_step_cost
from groupsparse.structure import MAX, block_diagonality_score, build_reg_matrix
from oracles import planted


def test_step_costs_match_direct_contraction():
    rng = np.random.default_rng(0)
    s = rng.random((6, 4))
    cost = build_reg_matrix(6, 4, MAX)
    p, q = Permutation.random(6, rng), Permutation.random(4, rng)
    cp = output_step_cost(s, cost, q)
    cq = input_step_cost(s, cost, p)
    for _ in range(20):
        p2, q2 = Permutation.random(6, rng), Permutation.random(4, rng)
        assert contract(p2.to_matrix(), cp) == pytest.approx(contract(permute_importance(s, p2, q), cost))
        assert contract(q2.to_matrix(), cq) == pytest.approx(contract(permute_importance(s, p, q2), cost))


def test_block_diagonal_input_scores_zero():
    s = np.kron(np.eye(2), np.ones((2, 2)))
    res = optimize_permutations(s, build_reg_matrix(4, 4, 1))
    assert res.objective == 0


def test_planted_recovery_16x16_g4():
    rng = np.random.default_rng(7)
    s = planted(16, 4, rng)
    # a level-2 matrix penalises two halvings and so leaves four diagonal blocks free
    res = optimize_permutations(s, build_reg_matrix(16, 16, 2), restarts=5, seed=0)
    assert res.objective == 0
    assert is_groupable(s, 3, res.p_out, res.q_in)


def test_objective_monotone_and_exact():
    rng = np.random.default_rng(1)
    cost = build_reg_matrix(8, 8, MAX)
    for _ in range(50):
        s = rng.random((8, 8))
        res = optimize_permutations(s, cost, restarts=0)
        assert all(b <= a for a, b in zip(res.history, res.history[1:]))
        assert res.objective == pytest.approx(
            block_diagonality_score(permute_importance(s, res.p_out, res.q_in), cost), rel=1e-12)
        assert res.objective <= block_diagonality_score(s, cost) + 1e-12


def test_each_step_is_an_exact_minimisation():
    rng = np.random.default_rng(2)
    s = rng.random((8, 8))
    cost = build_reg_matrix(8, 8, MAX)
    res = optimize_permutations(s, cost, restarts=0, polish=False)
    # at a fixed point neither block of variables can improve
    best_p = solve(output_step_cost(s, cost, res.q_in)).objective
    best_q = solve(input_step_cost(s, cost, res.p_out)).objective
    assert best_p >= res.objective - 1e-9
    assert best_q >= res.objective - 1e-9


def test_deterministic_and_warm_start():
    rng = np.random.default_rng(3)
    s = rng.random((16, 8))
    cost = build_reg_matrix(16, 8, MAX)
    a = optimize_permutations(s, cost, seed=4)
    b = optimize_permutations(s, cost, seed=4)
    assert (a.p_out, a.q_in, a.objective) == (b.p_out, b.q_in, b.objective)
    warm = optimize_permutations(s, cost, restarts=0, init=(a.p_out, a.q_in))
    assert warm.objective <= a.objective


def test_capacity_one_returns_init():
    s = np.random.default_rng(5).random((16, 3))
    res = optimize_permutations(s, build_reg_matrix(16, 3, MAX))
    assert res.p_out.is_identity() and res.q_in.is_identity()
    assert res.objective == 0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        optimize_permutations(np.ones((4, 4)), np.ones((4, 2)))


def test_is_groupable():
    s = np.kron(np.eye(2), np.ones((2, 2)))
    ident = Permutation.identity(4)
    assert is_groupable(s, 2, ident, ident)
    s[0, 3] = 1e-3
    assert not is_groupable(s, 2, ident, ident, tol=1e-6)
    assert is_groupable(s, 2, ident, ident, tol=1e-2)
