"""Weight tensors, importance matrices and channel permutations.

Tensors are plain numpy arrays; a convolution weight is shaped
``(c_out, c_in, k, k)`` and an importance matrix ``(c_out, c_in)``.
Permutations are index arrays wrapped in :class:`Permutation`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

Norm = Literal["l1", "l2"]


class Permutation:
    """Bijection on ``range(size)`` stored as an index array.

    Applied to a vector ``x`` it yields ``x[self.map]``, i.e. position ``a``
    of the result holds element ``map[a]`` of the input.
    """

    __slots__ = ("map",)

    def __init__(self, mapping):
        arr = np.asarray(mapping, dtype=np.int64).reshape(-1)
        if arr.size and (np.sort(arr) != np.arange(arr.size)).any():
            raise ValueError(f"not a permutation: {arr.tolist()}")
        arr.flags.writeable = False
        self.map = arr

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "Permutation":
        return cls(rng.permutation(n))

    @property
    def size(self) -> int:
        return int(self.map.size)

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.map)
        inv[self.map] = np.arange(self.map.size)
        return Permutation(inv)

    def then(self, other: "Permutation") -> "Permutation":
        """Permutation equivalent to indexing by ``self`` and then by ``other``."""
        return Permutation(self.map[other.map])

    def is_identity(self) -> bool:
        return bool((self.map == np.arange(self.map.size)).all())

    def tolist(self) -> list[int]:
        return self.map.tolist()

    def to_matrix(self) -> np.ndarray:
        """Dense 0/1 matrix ``M`` with ``M[a, map[a]] = 1`` (tests and debugging only)."""
        m = np.zeros((self.size, self.size))
        m[np.arange(self.size), self.map] = 1.0
        return m

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Permutation) and np.array_equal(self.map, other.map)

    def __hash__(self) -> int:
        return hash(self.map.tobytes())

    def __repr__(self) -> str:
        return f"Permutation({self.map.tolist()})"


def check_weight(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w)
    if w.ndim != 4 or w.shape[2] != w.shape[3] or min(w.shape) < 1:
        raise ValueError(f"expected weight of shape (c_out, c_in, k, k), got {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("weight tensor contains non-finite values")
    return w


def importance_matrix(w: np.ndarray, norm: Norm = "l1") -> np.ndarray:
    """Per-connection norm of each ``(k, k)`` kernel slice, shape ``(c_out, c_in)``."""
    w = check_weight(w)
    flat = w.reshape(w.shape[0], w.shape[1], -1)
    if norm == "l1":
        return np.abs(flat).sum(axis=2)
    if norm == "l2":
        return np.sqrt((flat * flat).sum(axis=2))
    raise ValueError(f"unknown norm {norm!r}")


def _check_perms(shape, p: Permutation, q: Permutation) -> None:
    if p.size != shape[0] or q.size != shape[1]:
        raise ValueError(
            f"permutation sizes ({p.size}, {q.size}) do not match channels {tuple(shape[:2])}"
        )


def permute_importance(s: np.ndarray, p: Permutation, q: Permutation) -> np.ndarray:
    """``P S Q`` with row ``a`` taken from row ``p.map[a]`` and column ``b`` from ``q.map[b]``."""
    s = np.asarray(s)
    _check_perms(s.shape, p, q)
    return s[np.ix_(p.map, q.map)]


def permute_weights(w: np.ndarray, p: Permutation, q: Permutation) -> np.ndarray:
    """Relabel output channels by ``p`` and input channels by ``q``."""
    w = check_weight(w)
    _check_perms(w.shape, p, q)
    return w[p.map][:, q.map]


def contract(a: np.ndarray, b: np.ndarray) -> float:
    """Element-wise product summed over all entries."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ValueError(f"tensor shape must be positive, got {self}")
