"""Turning a sparsified dense network into grouped convolutions."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Norm, Permutation, importance_matrix, permute_importance, permute_weights
from .micronet import GroupedLayer, MicroNet, _conv, _to_internal, reinitialize
from .regularizer import LayerSpec, model_sparsity
from .structure import build_relationship_matrix, group_level

MODES = ("Finetune", "FromScratch", "ShuffleNet", "Random", "NoShuffle")
BISECTION_STEPS = 40
P_FLOOR = 1e-12


@dataclass
class LayerPlan:
    name: str
    group_level: int
    capacity: int
    gather_in: Permutation
    scatter_out: Permutation
    off_block_mass_removed: float = 0.0

    @property
    def groups(self) -> int:
        return 1 << (self.group_level - 1)

    def to_json(self) -> dict:
        d = asdict(self)
        d["gather_in"] = self.gather_in.tolist()
        d["scatter_out"] = self.scatter_out.tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LayerPlan":
        d = dict(d)
        d["gather_in"] = Permutation(d["gather_in"])
        d["scatter_out"] = Permutation(d["scatter_out"])
        return cls(**d)


@dataclass
class GroupingPlan:
    layers: list[LayerPlan]
    threshold_used: float | None = None
    target_rate: float | None = None
    achieved_rate: float = 0.0
    flag: str | None = None
    lambda_history: list[float] = field(default_factory=list)
    sparsity_history: list[float] = field(default_factory=list)

    @property
    def levels(self) -> list[int]:
        return [lp.group_level for lp in self.layers]

    def to_json(self) -> dict:
        d = asdict(self)
        d["layers"] = [lp.to_json() for lp in self.layers]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GroupingPlan":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        d["layers"] = [LayerPlan.from_json(x) for x in d["layers"]]
        return cls(**d)


@dataclass(frozen=True)
class ThresholdChoice:
    p: float
    levels: list[int]
    achieved: float
    flag: str | None  # "capacity_limited", "degenerate_target" or None


def levels_at(s_perms, p: float, capacities) -> list[int]:
    return [group_level(s, p, cap) for s, cap in zip(s_perms, capacities)]


def choose_threshold(s_perms, specs: list[LayerSpec], target_rate: float,
                     steps: int = BISECTION_STEPS) -> ThresholdChoice:
    """Largest grouping threshold whose levels still reach ``target_rate``.

    Levels are nonincreasing in the threshold, so sparsity is monotone and
    bisection applies.  When even a vanishing threshold falls short the
    maximal configuration is returned and flagged.
    """
    caps = [spec.capacity for spec in specs]

    def rate(levels):
        return model_sparsity(levels, specs)

    if target_rate <= 0:
        ones = [1] * len(specs)
        return ThresholdChoice(1.0, ones, rate(ones), "degenerate_target")
    floor_levels = levels_at(s_perms, P_FLOOR, caps)
    if rate(floor_levels) < target_rate:
        return ThresholdChoice(P_FLOOR, floor_levels, rate(floor_levels), "capacity_limited")
    top_levels = levels_at(s_perms, 1.0, caps)
    if rate(top_levels) >= target_rate:
        return ThresholdChoice(1.0, top_levels, rate(top_levels), None)
    lo, hi = P_FLOOR, 1.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        if rate(levels_at(s_perms, mid, caps)) >= target_rate:
            lo = mid
        else:
            hi = mid
    levels = levels_at(s_perms, lo, caps)
    return ThresholdChoice(lo, levels, rate(levels), None)


def compress_layer(w: np.ndarray, bias: np.ndarray, p_out: Permutation, q_in: Permutation,
                   g: int, stride: int = 1, padding: int | None = None) -> GroupedLayer:
    """Permute, drop every slice outside the level-``g`` blocks, and pack the blocks."""
    wp = permute_weights(w, p_out, q_in)
    c_out, c_in = wp.shape[:2]
    groups = 1 << (g - 1)
    if c_out % groups or c_in % groups:
        raise ValueError(f"{c_out}x{c_in} layer cannot be split into {groups} groups")
    n, m = c_out // groups, c_in // groups
    packed = np.stack([wp[i * n:(i + 1) * n, i * m:(i + 1) * m] for i in range(groups)])
    return GroupedLayer(packed, np.asarray(bias)[p_out.map].copy(), q_in, p_out, stride, padding)


def off_block_fraction(s_perm: np.ndarray, g: int) -> float:
    total = float(s_perm.sum())
    if total == 0:
        return 0.0
    mask = build_relationship_matrix(*s_perm.shape, g)
    return float(s_perm[mask == 0].sum()) / total


def compress_model(net: MicroNet, perms: dict[str, tuple[Permutation, Permutation]],
                   target_rate: float, norm: Norm = "l1") -> tuple[MicroNet, GroupingPlan]:
    if net.compressed:
        raise ValueError("network is already compressed")
    specs = net.layer_specs()
    s_perms = []
    for name, layer in zip(net.names, net.convs):
        p, q = perms[name]
        s_perms.append(permute_importance(importance_matrix(layer.weight[0], norm), p, q))
    choice = choose_threshold(s_perms, specs, target_rate)
    convs, plans = [], []
    for name, layer, spec, s_perm, g in zip(net.names, net.convs, specs, s_perms, choice.levels):
        p, q = perms[name]
        convs.append(compress_layer(layer.weight[0], layer.bias, p, q, g, layer.stride, layer.padding))
        plans.append(LayerPlan(name, g, spec.capacity, q, p, off_block_fraction(s_perm, g)))
    out = MicroNet(convs, net.fc_weight.copy(), net.fc_bias.copy(), list(net.names), compressed=True)
    plan = GroupingPlan(plans, choice.p, target_rate, choice.achieved, choice.flag)
    return out, plan


def shufflenet_permutation(groups: int, channels: int) -> Permutation:
    """Reshape channels to ``(groups, channels/groups)``, transpose, flatten."""
    if channels % groups:
        raise ValueError(f"{channels} channels not divisible by {groups} groups")
    return Permutation(np.arange(channels).reshape(groups, -1).T.reshape(-1))


def shuffle_variant(net: MicroNet, plan: GroupingPlan, mode: str, seed: int = 0
                    ) -> tuple[MicroNet, GroupingPlan]:
    """Channel-shuffle ablation: swap permutations and/or reinitialize weights.

    ``Finetune`` keeps everything.  ``FromScratch`` keeps the learned
    permutations, ``ShuffleNet`` uses the fixed reshape-transpose shuffle
    between consecutive layers, ``Random`` seeded random permutations and
    ``NoShuffle`` identities; all but ``Finetune`` reinitialize weights.
    """
    if mode not in MODES:
        raise ValueError(f"unknown shuffle mode {mode!r}; expected one of {MODES}")
    if mode == "Finetune":
        return net.copy(), plan
    rng = np.random.default_rng(seed)
    layers = []
    prev_groups = 1
    for lp, layer in zip(plan.layers, net.convs):
        c_out, c_in = layer.c_out, layer.c_in
        if mode == "FromScratch":
            gather, scatter = lp.gather_in, lp.scatter_out
        elif mode == "ShuffleNet":
            gather, scatter = shufflenet_permutation(prev_groups, c_in), Permutation.identity(c_out)
        elif mode == "Random":
            gather, scatter = Permutation.random(c_in, rng), Permutation.random(c_out, rng)
        else:
            gather, scatter = Permutation.identity(c_in), Permutation.identity(c_out)
        layers.append(LayerPlan(lp.name, lp.group_level, lp.capacity, gather, scatter,
                                lp.off_block_mass_removed))
        prev_groups = lp.groups
    new_plan = GroupingPlan(layers, plan.threshold_used, plan.target_rate, plan.achieved_rate,
                            plan.flag, list(plan.lambda_history), list(plan.sparsity_history))
    convs = [
        GroupedLayer(layer.weight.copy(), layer.bias.copy(), lp.gather_in, lp.scatter_out,
                     layer.stride, layer.padding)
        for lp, layer in zip(layers, net.convs)
    ]
    shell = MicroNet(convs, net.fc_weight.copy(), net.fc_bias.copy(), list(net.names), compressed=True)
    return reinitialize(shell, np.random.default_rng([seed, 1])), new_plan


def build_compressed(dense_net: MicroNet, plan: GroupingPlan) -> MicroNet:
    """Rebuild the compressed network from a dense checkpoint and its plan."""
    convs = [
        compress_layer(layer.weight[0], layer.bias, lp.scatter_out, lp.gather_in, lp.group_level,
                       layer.stride, layer.padding)
        for lp, layer in zip(plan.layers, dense_net.convs)
    ]
    return MicroNet(convs, dense_net.fc_weight.copy(), dense_net.fc_bias.copy(),
                    list(dense_net.names), compressed=True)


def fused_indices(net: MicroNet) -> tuple[list[np.ndarray], np.ndarray]:
    """Single gather index per layer with each scatter folded into the next gather.

    Layer outputs then stay in grouped order; the last scatter is folded into
    the classifier columns.
    """
    indices = []
    prev_inv = None
    for layer in net.convs:
        gather = layer.gather_in.map
        indices.append(gather if prev_inv is None else prev_inv[gather])
        prev_inv = layer.scatter_out.inverse().map
    fc_cols = net.convs[-1].scatter_out.map
    return indices, fc_cols


def fused_forward(net: MicroNet, x: np.ndarray) -> np.ndarray:
    """Logits computed with one index op between consecutive layers."""
    indices, fc_cols = fused_indices(net)
    h = _to_internal(x)
    for layer, idx in zip(net.convs, indices):
        z, _ = _conv(h[idx], layer.weight, layer.bias, layer.stride, layer.padding)
        h = np.maximum(z, 0)
    feat = h.mean(axis=(1, 2)).T
    return feat @ net.fc_weight[:, fc_cols].T + net.fc_bias


def confusion_matrix(scatter_prev: Permutation, groups_prev: int,
                     gather_next: Permutation, groups_next: int) -> np.ndarray:
    """Channel counts from group ``i`` of one layer into group ``j`` of the next."""
    c = scatter_prev.size
    if gather_next.size != c:
        raise ValueError("adjacent layers disagree on the shared channel count")
    pos_prev = scatter_prev.inverse().map  # grouped position of each channel
    pos_next = gather_next.inverse().map
    d = np.zeros((groups_prev, groups_next), dtype=np.int64)
    np.add.at(d, (pos_prev // (c // groups_prev), pos_next // (c // groups_next)), 1)
    return d
