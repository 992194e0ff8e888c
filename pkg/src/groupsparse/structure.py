"""Structured regularization matrices, relationship masks and group levels.

Group level ``g`` corresponds to a cardinality of ``2**(g - 1)`` groups.
"""
from __future__ import annotations

import math

import numpy as np

from .core import contract

MAX = "max"


def _twos(n: int) -> int:
    """Exponent of the largest power of two dividing ``n``."""
    return (n & -n).bit_length() - 1


def max_group_level(c_out: int, c_in: int) -> int:
    """Largest admissible group level: ``u + 1`` where ``2**u`` divides gcd(c_out, c_in)."""
    if c_out < 1 or c_in < 1:
        raise ValueError("channel counts must be positive")
    return _twos(math.gcd(c_out, c_in)) + 1


def _check_level(c_out: int, c_in: int, level) -> int:
    cap = max_group_level(c_out, c_in)
    if level == MAX or level is None:
        return cap
    level = int(level)
    if not 1 <= level <= cap:
        raise ValueError(f"group level {level} outside [1, {cap}] for a {c_out}x{c_in} layer")
    return level


def build_reg_matrix(c_out: int, c_in: int, level=MAX, power: float = 0.5) -> np.ndarray:
    """Banded penalty on off-diagonal blocks, decaying by ``power`` per halving.

    Depth ``d`` (0-based) puts ``power**d`` on the two off-diagonal halves of
    every diagonal block left by the previous depths.  Halving continues for
    ``level`` depths, or until a block side becomes odd; ``level="max"``
    gives the full cost matrix.
    """
    budget = _check_level(c_out, c_in, level)
    if not 0 < power <= 1:
        raise ValueError(f"power must lie in (0, 1], got {power}")
    depths = min(budget, _twos(c_out), _twos(c_in))
    rows = np.arange(c_out)[:, None]
    cols = np.arange(c_in)[None, :]
    reg = np.zeros((c_out, c_in))
    for d in range(depths):
        h1, h2 = c_out >> d, c_in >> d
        same_block = (rows // h1) == (cols // h2)
        split = (rows // (h1 // 2)) != (cols // (h2 // 2))
        reg[same_block & split] = power**d
    return reg


def build_relationship_matrix(c_out: int, c_in: int, level: int) -> np.ndarray:
    """0/1 mask with ``2**(level-1)`` equal diagonal blocks."""
    level = _check_level(c_out, c_in, level)
    groups = 1 << (level - 1)
    if c_out % groups or c_in % groups:
        raise ValueError(f"{c_out}x{c_in} is not divisible into {groups} groups")
    rows = np.arange(c_out)[:, None] // (c_out // groups)
    cols = np.arange(c_in)[None, :] // (c_in // groups)
    return (rows == cols).astype(np.float64)


def group_level(s_perm: np.ndarray, p_threshold: float = 0.9, capacity: int | None = None) -> int:
    """Largest level whose diagonal blocks keep at least ``p_threshold`` of the mass."""
    if not 0 < p_threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {p_threshold}")
    s_perm = np.asarray(s_perm, dtype=np.float64)
    if capacity is None:
        capacity = max_group_level(*s_perm.shape)
    total = float(s_perm.sum())
    best = 1
    # every level is checked, so the answer never depends on rounding-level monotonicity
    for g in range(2, capacity + 1):
        if contract(s_perm, build_relationship_matrix(*s_perm.shape, g)) >= p_threshold * total:
            best = g
    return best


def block_diagonality_score(s_perm: np.ndarray, cost: np.ndarray) -> float:
    return contract(s_perm, cost)
