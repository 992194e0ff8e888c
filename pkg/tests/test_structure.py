import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupsparse.core import Permutation, permute_importance
from groupsparse.structure import (
    MAX, block_diagonality_score, build_reg_matrix, build_relationship_matrix, group_level,
    max_group_level,
)
from oracles import capacity, scan_level, struc_reg

DIMS = [1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64]


def test_max_group_level_examples():
    assert max_group_level(16, 16) == 5
    assert max_group_level(3, 16) == 1
    assert max_group_level(48, 64) == 5
    assert all(max_group_level(a, b) == capacity(a, b) for a in DIMS for b in DIMS)
    with pytest.raises(ValueError):
        max_group_level(0, 4)


def test_reg_matrix_examples():
    np.testing.assert_array_equal(
        build_reg_matrix(4, 4, 1), [[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]]
    )
    np.testing.assert_array_equal(
        build_reg_matrix(4, 4, MAX),
        [[0, 0.5, 1, 1], [0.5, 0, 1, 1], [1, 1, 0, 0.5], [1, 1, 0.5, 0]],
    )
    r = build_reg_matrix(8, 8, 3)
    assert sorted(set(r.ravel())) == [0, 0.25, 0.5, 1]
    assert (np.diag(r) == 0).all()
    np.testing.assert_array_equal(r, build_reg_matrix(8, 8, MAX))


@pytest.mark.parametrize("c_out", DIMS)
@pytest.mark.parametrize("c_in", DIMS)
def test_reg_matrix_matches_recursive_oracle(c_out, c_in):
    cap = max_group_level(c_out, c_in)
    for power in (0.5, 0.25, 1.0):
        np.testing.assert_array_equal(build_reg_matrix(c_out, c_in, MAX, power),
                                      struc_reg(c_out, c_in, None, power))
        for level in range(1, cap + 1):
            np.testing.assert_array_equal(build_reg_matrix(c_out, c_in, level, power),
                                          struc_reg(c_out, c_in, level, power))


@pytest.mark.parametrize("n", [2, 4, 8, 16, 32])
def test_reg_matrix_properties(n):
    cap = max_group_level(n, n)
    prev = np.zeros((n, n))
    for g in range(1, cap + 1):
        r = build_reg_matrix(n, n, g)
        np.testing.assert_array_equal(r, r.T)
        assert (r >= prev).all()
        # the finest blocks the matrix leaves untouched are exactly the diagonal blocks of U_{g+1}
        if g < cap:
            mask = build_relationship_matrix(n, n, g + 1)
            assert ((r == 0) == (mask == 1)).all()
        prev = r
    np.testing.assert_array_equal(prev, build_reg_matrix(n, n, MAX))


def test_reg_matrix_rejects_bad_levels():
    with pytest.raises(ValueError):
        build_reg_matrix(4, 4, 4)
    with pytest.raises(ValueError):
        build_reg_matrix(4, 4, 0)
    with pytest.raises(ValueError):
        build_reg_matrix(4, 4, 1, power=0.0)


def test_relationship_examples():
    np.testing.assert_array_equal(build_relationship_matrix(4, 4, 1), np.ones((4, 4)))
    np.testing.assert_array_equal(
        build_relationship_matrix(4, 4, 2), [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]
    )
    np.testing.assert_array_equal(build_relationship_matrix(8, 8, 4), np.eye(8))
    u = build_relationship_matrix(16, 32, 3)
    assert u.sum() == 4 * 4 * 8
    with pytest.raises(ValueError):
        build_relationship_matrix(4, 4, 4)


def test_relationship_nested():
    for g in range(1, 4):
        assert (build_relationship_matrix(16, 8, g + 1) <= build_relationship_matrix(16, 8, g)).all()


def test_group_level_examples():
    blocks = np.kron(np.eye(2), np.ones((2, 2)))
    assert group_level(blocks, 0.9, 3) == 2
    assert group_level(np.ones((4, 4)), 0.9) == 1
    s = np.full((8, 8), 0.05 * 64 / 32)
    s[:4, :4] = s[4:, 4:] = 0.95 * 64 / 32
    assert group_level(s, 0.9) == 2 == scan_level(s, 0.9, 4)
    assert group_level(np.zeros((4, 4)), 0.9) == 3
    with pytest.raises(ValueError):
        group_level(blocks, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([2, 4, 8, 12, 16]), st.sampled_from([2, 4, 8, 16]), st.integers(0, 2**31 - 1),
       st.sampled_from([0.5, 0.9, 0.99]))
def test_group_level_matches_scan(c_out, c_in, seed, p):
    rng = np.random.default_rng(seed)
    s = rng.random((c_out, c_in)) * (rng.random((c_out, c_in)) < 0.3)
    cap = max_group_level(c_out, c_in)
    assert group_level(s, p, cap) == scan_level(s, p, cap)
    assert group_level(1e3 * s, p, cap) == group_level(s, p, cap)


def test_group_level_sum_over_s_or_permuted():
    rng = np.random.default_rng(0)
    s = rng.random((8, 8))
    p, q = Permutation.random(8, rng), Permutation.random(8, rng)
    sp = permute_importance(s, p, q)
    assert np.isclose(sp.sum(), s.sum())
    for g in range(1, 5):
        assert (sp * build_relationship_matrix(8, 8, g)).sum() <= s.sum() + 1e-12


def test_block_diagonality_score():
    r = build_reg_matrix(4, 4, MAX)
    assert block_diagonality_score(np.eye(4), r) == 0
    assert block_diagonality_score(np.ones((4, 4)), r) == 10
    s = np.random.default_rng(1).random((4, 4))
    bumped = s.copy()
    bumped[0, 3] += 1
    assert block_diagonality_score(bumped, r) >= block_diagonality_score(s, r)
