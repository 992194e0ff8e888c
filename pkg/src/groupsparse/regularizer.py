"""Structured L1 penalty, model sparsity and the adaptive penalty coefficient."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import Norm, Permutation, TensorShape, check_weight, contract
from .structure import max_group_level

DELTA_LAMBDA = 2e-6


@dataclass(frozen=True)
class LayerSpec:
    name: str
    c_in: int
    c_out: int
    k: int
    stride: int = 1
    in_shape: TensorShape | None = None
    has_shortcut_role: bool = False

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k, self.stride) < 1:
            raise ValueError(f"layer {self.name!r} has non-positive dimensions")

    @property
    def params(self) -> int:
        return self.c_in * self.c_out * self.k * self.k

    @property
    def capacity(self) -> int:
        return max_group_level(self.c_out, self.c_in)


def reg_loss(s_perm: np.ndarray, reg: np.ndarray) -> float:
    return contract(s_perm, reg)


def reg_subgradient(
    w: np.ndarray, p_out: Permutation, q_in: Permutation, reg: np.ndarray, norm: Norm = "l1"
) -> np.ndarray:
    """Subgradient of ``reg_loss(P S(w) Q, reg)`` with respect to ``w``.

    A kernel slice that is exactly zero gets a zero subgradient.
    """
    w = check_weight(w)
    reg = np.asarray(reg)
    if reg.shape != w.shape[:2] or p_out.size != w.shape[0] or q_in.size != w.shape[1]:
        raise ValueError("weight, permutations and regularization matrix disagree on shape")
    # slice (j, i) sits at permuted position (p^-1(j), q^-1(i))
    coef = reg[np.ix_(p_out.inverse().map, q_in.inverse().map)]
    if norm == "l1":
        direction = np.sign(w)
    elif norm == "l2":
        n2 = np.sqrt((w * w).sum(axis=(2, 3), keepdims=True))
        direction = np.divide(w, n2, out=np.zeros_like(w), where=n2 > 0)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return coef[:, :, None, None].astype(w.dtype) * direction


def model_sparsity(levels, specs) -> float:
    """Fraction of convolution parameters removed by the given group levels."""
    levels = list(levels)
    if len(levels) != len(specs):
        raise ValueError(f"{len(levels)} levels for {len(specs)} layers")
    total = kept = 0
    for g, spec in zip(levels, specs):
        if not 1 <= g <= spec.capacity:
            raise ValueError(f"level {g} exceeds capacity {spec.capacity} of {spec.name!r}")
        total += spec.params
        kept += spec.params / (1 << (g - 1))
    return 1.0 - kept / total


@dataclass(frozen=True)
class SparsityState:
    total_epochs: int
    target: float
    lam: float = 0.0
    delta_lambda: float = DELTA_LAMBDA
    epoch: int = 1
    last_sparsity: float = 0.0
    last_action: str = "init"


def lambda_step(state: SparsityState, current_sparsity: float) -> SparsityState:
    """Advance the penalty coefficient by one epoch.

    Raises it when sparsity lags a linear ramp to the target, lowers it
    (never below zero) once sparsity overshoots the target, else holds.
    """
    t, n = state.epoch, state.total_epochs
    if not 1 <= t <= n:
        raise ValueError(f"epoch {t} outside [1, {n}]")
    prev = state.last_sparsity
    if current_sparsity - prev < (state.target - prev) / (n - t + 1):
        lam, action = state.lam + state.delta_lambda, "increase"
    elif current_sparsity > state.target:
        lam, action = max(0.0, state.lam - state.delta_lambda), "decrease"
    else:
        lam, action = state.lam, "hold"
    return replace(
        state, lam=lam, epoch=t + 1, last_sparsity=float(current_sparsity), last_action=action
    )
