import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupsparse.core import (
    Permutation, TensorShape, check_weight, contract, importance_matrix, permute_importance,
    permute_weights,
)


def perms(n):
    return st.permutations(list(range(n))).map(Permutation)


def test_importance_single_element_slices():
    w = np.array([3.0, -4.0, 0.0, 2.0]).reshape(2, 2, 1, 1)
    np.testing.assert_array_equal(importance_matrix(w), [[3, 4], [0, 2]])


def test_importance_all_ones():
    np.testing.assert_array_equal(importance_matrix(np.ones((2, 2, 3, 3))), np.full((2, 2), 9.0))


def test_importance_l2_matches_slice_loop():
    w = np.random.default_rng(0).standard_normal((4, 4, 3, 3))
    ref = np.array([[np.sqrt((w[j, i] ** 2).sum()) for i in range(4)] for j in range(4)])
    np.testing.assert_allclose(importance_matrix(w, "l2"), ref, rtol=1e-14)


def test_importance_homogeneous():
    w = np.random.default_rng(1).standard_normal((3, 5, 3, 3))
    np.testing.assert_allclose(importance_matrix(2.5 * w), 2.5 * importance_matrix(w))


def test_importance_rejects_bad_input():
    with pytest.raises(ValueError):
        importance_matrix(np.ones((2, 2, 3)))
    with pytest.raises(ValueError):
        importance_matrix(np.ones((2, 2, 3, 1)))
    bad = np.ones((2, 2, 1, 1))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        check_weight(bad)
    with pytest.raises(ValueError):
        importance_matrix(np.ones((2, 2, 1, 1)), "l3")


def test_permutation_validation():
    with pytest.raises(ValueError):
        Permutation([0, 0, 1])
    with pytest.raises(ValueError):
        Permutation([1, 2, 3])
    p = Permutation([2, 0, 1])
    assert p.inverse().then(p).is_identity()
    np.testing.assert_array_equal(p.to_matrix() @ np.arange(3), p.map)
    with pytest.raises(ValueError):
        p.map[0] = 1


def test_permute_importance_examples():
    s = np.array([[1.0, 2.0], [3.0, 4.0]])
    ident = Permutation.identity(2)
    np.testing.assert_array_equal(permute_importance(s, ident, ident), s)
    np.testing.assert_array_equal(permute_importance(s, Permutation([1, 0]), ident), [[3, 4], [1, 2]])
    with pytest.raises(ValueError):
        permute_importance(s, Permutation.identity(3), ident)


def test_permute_importance_is_matrix_product():
    rng = np.random.default_rng(2)
    s = rng.random((5, 7))
    p, q = Permutation.random(5, rng), Permutation.random(7, rng)
    # Q_{i,b} = 1 iff i = q[b], i.e. the transpose of q.to_matrix()
    np.testing.assert_allclose(permute_importance(s, p, q), p.to_matrix() @ s @ q.to_matrix().T)


@settings(max_examples=50, deadline=None)
@given(perms(6), perms(6), st.integers(0, 2**31 - 1))
def test_permute_importance_preserves_entries(p, q, seed):
    s = np.random.default_rng(seed).random((6, 6))
    out = permute_importance(s, p, q)
    assert np.isclose(out.sum(), s.sum())
    np.testing.assert_array_equal(np.sort(out, axis=None), np.sort(s, axis=None))


@settings(max_examples=50, deadline=None)
@given(perms(4), perms(3), st.integers(0, 2**31 - 1))
def test_permute_weights_consistent_and_invertible(p, q, seed):
    w = np.random.default_rng(seed).standard_normal((4, 3, 3, 3))
    wp = permute_weights(w, p, q)
    np.testing.assert_array_equal(importance_matrix(wp), permute_importance(importance_matrix(w), p, q))
    np.testing.assert_array_equal(permute_weights(wp, p.inverse(), q.inverse()), w)


def test_permute_weights_identity_is_bitwise():
    w = np.random.default_rng(3).standard_normal((4, 4, 3, 3))
    out = permute_weights(w, Permutation.identity(4), Permutation.identity(4))
    assert out.tobytes() == w.tobytes()


def test_contract():
    assert contract(np.eye(2), np.eye(2)) == 2
    a = np.random.default_rng(4).random((5, 5))
    assert contract(a, np.zeros((5, 5))) == 0
    b = np.random.default_rng(5).random((5, 5))
    naive = sum(a[i, j] * b[i, j] for i in range(5) for j in range(5))
    assert contract(a, b) == pytest.approx(naive, rel=1e-14)
    assert contract(a, b) == pytest.approx(contract(b, a), rel=1e-14)
    with pytest.raises(ValueError):
        contract(np.ones((2, 2)), np.ones((2, 3)))


def test_tensor_shape():
    assert TensorShape(3, 16, 16).channels == 3
    with pytest.raises(ValueError):
        TensorShape(0, 4, 4)
