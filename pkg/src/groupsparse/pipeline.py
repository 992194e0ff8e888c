"""Train with structured regularization, compress, finetune, verify and report."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import accounting
from .compressor import (
    MODES, GroupingPlan, LayerPlan, build_compressed, compress_model, confusion_matrix,
    fused_forward, off_block_fraction, shuffle_variant,
)
from .core import Permutation, importance_matrix, permute_importance
from .micronet import (
    MICRONET_LAYERS, SGD, GroupedLayer, MicroNet, RegTerm, SynthDataset, evaluate,
    init_micronet, make_dataset, train_epoch,
)
from .regularizer import DELTA_LAMBDA, SparsityState, lambda_step, model_sparsity
from .shuffle import optimize_permutations
from .structure import MAX, build_reg_matrix, group_level

MAGIC = b"SSZ1"
DTYPE_F32 = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_seed: int = 0
    epochs: int = 60
    finetune_epochs: int = 60
    lr: float = 0.05
    finetune_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    finetune_weight_decay: float = 1e-4
    batch_size: int = 64
    target_rate: float = 0.5
    p_train: float = 0.9
    delta_lambda: float = DELTA_LAMBDA
    power: float = 0.5
    norm: str = "l1"
    restarts: int = 5
    max_iters: int = 50
    polish: bool = False
    shuffle_mode: str = "Finetune"
    regularize: bool = True
    n_train: int = 5000
    n_test: int = 1000
    sigma: float = 0.3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.finetune_epochs < 0 or self.batch_size < 1 or self.restarts < 0:
            raise ValueError("finetune_epochs, batch_size and restarts must be nonnegative")
        if not 0 <= self.target_rate < 1:
            raise ValueError(f"target_rate must lie in [0, 1), got {self.target_rate}")
        if not 0 < self.p_train <= 1:
            raise ValueError(f"p_train must lie in (0, 1], got {self.p_train}")
        if not 0 < self.power <= 1:
            raise ValueError(f"power must lie in (0, 1], got {self.power}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if min(self.lr, self.finetune_lr, self.delta_lambda) <= 0:
            raise ValueError("learning rates and delta_lambda must be positive")
        if min(self.weight_decay, self.finetune_weight_decay, self.sigma) < 0:
            raise ValueError("weight decay and sigma must be nonnegative")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.shuffle_mode not in MODES:
            raise ValueError(f"unknown shuffle mode {self.shuffle_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dataset(self) -> SynthDataset:
        return make_dataset(self.data_seed, self.n_train, self.n_test, self.sigma)


# -- checkpoints ---------------------------------------------------------------

def write_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: only float32 tensors are stored, got {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an SSZ1 checkpoint")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        dtype, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        if dtype != DTYPE_F32:
            raise ValueError(f"{name}: unsupported dtype code {dtype}")
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated tensor {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def net_to_tensors(net: MicroNet) -> dict[str, np.ndarray]:
    out = {}
    for name, layer in zip(net.names, net.convs):
        if net.compressed:
            out[f"{name}.group_weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        else:
            out[f"{name}.weight"] = layer.dense_weight()
            out[f"{name}.bias"] = layer.dense_bias()
    out["fc.weight"] = net.fc_weight
    out["fc.bias"] = net.fc_bias
    return out


def is_compressed(tensors: dict[str, np.ndarray]) -> bool:
    return any(k.endswith(".group_weight") for k in tensors)


def conv_names(tensors: dict[str, np.ndarray]) -> list[str]:
    return [k.rsplit(".", 1)[0] for k in tensors if k.endswith("weight") and not k.startswith("fc.")]


def tensors_to_net(tensors: dict[str, np.ndarray], plan: GroupingPlan | None = None,
                   strides=None) -> MicroNet:
    """Rebuild a network; compressed checkpoints need the plan for their permutations."""
    names = conv_names(tensors)
    if strides is None:
        strides = [spec[3] for spec in MICRONET_LAYERS]
    if len(strides) != len(names):
        raise ValueError(f"{len(names)} convolutions but {len(strides)} strides")
    compressed = is_compressed(tensors)
    if compressed and plan is None:
        raise ValueError("a compressed checkpoint needs its plan")
    convs = []
    for i, (name, stride) in enumerate(zip(names, strides)):
        bias = tensors[f"{name}.bias"].copy()
        if compressed:
            lp = plan.layers[i]
            if lp.name != name:
                raise ValueError(f"plan layer {lp.name!r} does not match checkpoint layer {name!r}")
            convs.append(GroupedLayer(tensors[f"{name}.group_weight"].copy(), bias,
                                      lp.gather_in, lp.scatter_out, stride))
        else:
            convs.append(GroupedLayer.dense(tensors[f"{name}.weight"].copy(), bias, stride))
    return MicroNet(convs, tensors["fc.weight"].copy(), tensors["fc.bias"].copy(), names, compressed)


# -- plans ---------------------------------------------------------------------

def save_plan(path: str | Path, plan: GroupingPlan, **extra) -> None:
    doc = plan.to_json()
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_plan(path: str | Path) -> tuple[GroupingPlan, dict]:
    doc = json.loads(Path(path).read_text())
    return GroupingPlan.from_json(doc), doc


# -- stages ----------------------------------------------------------------------

@dataclass
class TrainResult:
    net: MicroNet
    plan: GroupingPlan
    records: list[dict] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)


def _importances(net: MicroNet, norm) -> list[np.ndarray]:
    return [importance_matrix(layer.dense_weight(), norm) for layer in net.convs]


def run_train(config: RunConfig, data: SynthDataset | None = None) -> TrainResult:
    """Sparsification stage; each epoch trains, then updates P/Q, levels, R_g and lambda.

    With ``config.regularize`` false the penalty stays off (lambda fixed at 0)
    while the bookkeeping still runs, which gives the dense baseline.
    """
    data = data or config.dataset()
    net = init_micronet(np.random.default_rng([config.seed, 0]))
    shuffle_rng = np.random.default_rng([config.seed, 2])
    opt = SGD(config.momentum)
    specs = net.layer_specs()
    costs = [build_reg_matrix(s.c_out, s.c_in, MAX, config.power) for s in specs]
    events: list[dict] = []
    records: list[dict] = []

    perms = []
    for spec, s, cost in zip(specs, _importances(net, config.norm), costs):
        res = optimize_permutations(s, cost, config.max_iters, config.restarts, config.seed,
                                    polish=config.polish)
        perms.append((res.p_out, res.q_in))
    events.append({"epoch": 0, "step": "permutations"})
    levels = [1] * len(specs)
    mats = [build_reg_matrix(s.c_out, s.c_in, 1, config.power) for s in specs]
    state = SparsityState(config.epochs, config.target_rate, delta_lambda=config.delta_lambda)
    lam_hist, spars_hist = [], []

    for t in range(1, config.epochs + 1):
        lam = state.lam if config.regularize else 0.0
        reg = RegTerm(lam, dict(zip(net.names, mats)), dict(zip(net.names, perms)), config.norm)
        stats = train_epoch(net, data.x_train, data.y_train, opt, config.lr, shuffle_rng,
                            config.batch_size, config.weight_decay, reg)
        events.append({"epoch": t, "step": "train"})

        importances = _importances(net, config.norm)
        objectives = []
        for i, (s, cost) in enumerate(zip(importances, costs)):
            res = optimize_permutations(s, cost, config.max_iters, 0, config.seed, init=perms[i],
                                        polish=config.polish)
            perms[i] = (res.p_out, res.q_in)
            objectives.append(res.objective)
        events.append({"epoch": t, "step": "permutations"})

        s_perms = [permute_importance(s, p, q) for s, (p, q) in zip(importances, perms)]
        levels = [group_level(sp, config.p_train, spec.capacity) for sp, spec in zip(s_perms, specs)]
        events.append({"epoch": t, "step": "levels"})

        mats = [build_reg_matrix(s.c_out, s.c_in, g, config.power) for s, g in zip(specs, levels)]
        events.append({"epoch": t, "step": "reg_matrices"})

        sparsity = model_sparsity(levels, specs)
        if config.regularize:
            state = lambda_step(state, sparsity)
        else:
            state = SparsityState(config.epochs, config.target_rate, 0.0, config.delta_lambda,
                                  t + 1, sparsity, "hold")
        events.append({"epoch": t, "step": "lambda"})
        lam_hist.append(lam)
        spars_hist.append(sparsity)
        records.append({
            "epoch": t, "loss": stats["loss"], "acc": stats["acc"], "levels": list(levels),
            "lambda": lam, "lambda_next": state.lam, "action": state.last_action,
            "sparsity": sparsity, "objectives": objectives,
        })

    layer_plans = [
        LayerPlan(name, g, spec.capacity, q, p, off_block_fraction(sp, g))
        for name, g, spec, (p, q), sp in zip(net.names, levels, specs, perms, s_perms)
    ]
    plan = GroupingPlan(layer_plans, config.p_train, config.target_rate,
                        model_sparsity(levels, specs), None, lam_hist, spars_hist)
    return TrainResult(net, plan, records, events)


def run_compress(net: MicroNet, plan: GroupingPlan, target_rate: float, config: RunConfig,
                 data: SynthDataset | None = None) -> tuple[MicroNet, GroupingPlan, dict]:
    """Compress with the trained permutations; logs accuracy before and after."""
    if net.compressed:
        raise ValueError("checkpoint is already compressed; compress a dense checkpoint")
    data = data or config.dataset()
    perms = {lp.name: (lp.scatter_out, lp.gather_in) for lp in plan.layers}
    cnet, cplan = compress_model(net, perms, target_rate, config.norm)
    cplan.lambda_history = list(plan.lambda_history)
    cplan.sparsity_history = list(plan.sparsity_history)
    metrics = {
        "pre_compression_acc": evaluate(net, data.x_test, data.y_test),
        "post_compression_acc": evaluate(cnet, data.x_test, data.y_test),
    }
    return cnet, cplan, metrics


def step_lr(base: float, epoch: int, total: int) -> float:
    """Decay by 10x at 50% and 75% of ``total`` (0-based ``epoch``)."""
    drops = (epoch >= total // 2) + (epoch >= (3 * total) // 4)
    return base * 0.1**drops


def finetune(net: MicroNet, config: RunConfig, data: SynthDataset) -> list[dict]:
    rng = np.random.default_rng([config.seed, 3])
    opt = SGD(config.momentum)
    history = []
    for e in range(config.finetune_epochs):
        lr = step_lr(config.finetune_lr, e, config.finetune_epochs)
        stats = train_epoch(net, data.x_train, data.y_train, opt, lr, rng, config.batch_size,
                            config.finetune_weight_decay)
        history.append({"epoch": e + 1, "lr": lr, **stats})
    return history


def run_finetune(cnet: MicroNet, plan: GroupingPlan, config: RunConfig,
                 data: SynthDataset | None = None) -> tuple[MicroNet, GroupingPlan, dict]:
    """Apply the configured shuffle mode, then finetune the grouped weights and classifier."""
    if not cnet.compressed:
        raise ValueError("finetune expects a compressed checkpoint")
    data = data or config.dataset()
    net, plan = shuffle_variant(cnet, plan, config.shuffle_mode, config.seed)
    history = finetune(net, config, data)
    metrics = {"mode": config.shuffle_mode, "history": history,
               "test_acc": evaluate(net, data.x_test, data.y_test)}
    return net, plan, metrics


def run_baseline(config: RunConfig, data: SynthDataset | None = None) -> dict:
    """Same schedule with lambda held at 0 and no compression."""
    data = data or config.dataset()
    base = RunConfig.from_dict({**asdict(config), "regularize": False})
    result = run_train(base, data)
    history = finetune(result.net, base, data)
    return {"net": result.net, "history": history,
            "test_acc": evaluate(result.net, data.x_test, data.y_test)}


# -- verification and reports ------------------------------------------------------

def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


def verify(tensors: dict[str, np.ndarray], plan: GroupingPlan, n_inputs: int = 8,
           tol: float = 1e-4, seed: int = 0, norm: str = "l1") -> list[tuple[str, bool, str]]:
    """Checks a checkpoint and plan against each other; returns (check, ok, detail) rows."""
    checks = []

    def add(name, ok, detail=""):
        checks.append((name, bool(ok), detail))

    names = conv_names(tensors)
    add("layer names", names == [lp.name for lp in plan.layers],
        f"checkpoint {names}, plan {[lp.name for lp in plan.layers]}")
    if not checks[-1][1]:
        return checks
    net = tensors_to_net(tensors, plan)
    specs = net.layer_specs()
    for lp, layer, spec in zip(plan.layers, net.convs, specs):
        add(f"{lp.name} level", 1 <= lp.group_level <= spec.capacity == lp.capacity,
            f"g={lp.group_level}, capacity={spec.capacity}")
        add(f"{lp.name} permutation sizes",
            lp.gather_in.size == layer.c_in and lp.scatter_out.size == layer.c_out)
    add("achieved rate", abs(plan.achieved_rate - model_sparsity(plan.levels, specs)) < 1e-12,
        f"plan {plan.achieved_rate}, recomputed {model_sparsity(plan.levels, specs)}")

    cnet = net if net.compressed else build_compressed(net, plan)
    for lp, layer, spec in zip(plan.layers, cnet.convs, specs):
        add(f"{lp.name} parameter ledger", layer.weight.size * lp.groups == spec.params)

    # grouped network against the same network with masked dense weights
    masked = MicroNet([GroupedLayer.dense(l.dense_weight(), l.dense_bias(), l.stride, l.padding)
                       for l in cnet.convs], cnet.fc_weight, cnet.fc_bias, list(cnet.names))
    x = np.random.default_rng(seed).standard_normal((n_inputs, 3, 16, 16)).astype(cnet.dtype)
    ref = masked.forward(x)
    err = _rel_err(cnet.forward(x), ref)
    add("grouped vs masked dense", err <= tol, f"relative error {err:.2e}")
    err = _rel_err(fused_forward(cnet, x), ref)
    add("fused shuffle", err <= tol, f"relative error {err:.2e}")
    if not net.compressed:
        s_perms = [permute_importance(importance_matrix(l.dense_weight(), norm), lp.scatter_out, lp.gather_in)
                   for l, lp in zip(net.convs, plan.layers)]
        off = [off_block_fraction(sp, lp.group_level) for sp, lp in zip(s_perms, plan.layers)]
        add("off-block mass", np.allclose(off, [lp.off_block_mass_removed for lp in plan.layers],
                                          rtol=1e-6, atol=1e-9))

    for a, b in zip(plan.layers, plan.layers[1:]):
        d = confusion_matrix(a.scatter_out, a.groups, b.gather_in, b.groups)
        c = a.scatter_out.size
        add(f"{a.name}->{b.name} confusion marginals",
            (d.sum(1) == c // a.groups).all() and (d.sum(0) == c // b.groups).all())
    return checks


def confusion_matrices(plan: GroupingPlan) -> list[dict]:
    out = []
    for a, b in zip(plan.layers, plan.layers[1:]):
        d = confusion_matrix(a.scatter_out, a.groups, b.gather_in, b.groups)
        out.append({"from": a.name, "to": b.name, "groups": [a.groups, b.groups],
                    "matrix": d.tolist()})
    return out


def run_report(plan: GroupingPlan, arch: dict | None = None) -> dict:
    """Cardinalities, confusion matrices, params/FLOPs ledger and trajectories."""
    arch = arch or accounting.micronet_arch()
    return {
        "cardinality": [
            {"name": lp.name, "group_level": lp.group_level, "cardinality": lp.groups,
             "capacity": lp.capacity, "off_block_mass_removed": lp.off_block_mass_removed}
            for lp in plan.layers
        ],
        "confusion": confusion_matrices(plan),
        "ledger": accounting.compression_report(arch, plan.levels),
        "trajectory": [
            {"epoch": i + 1, "lambda": lam, "sparsity": r}
            for i, (lam, r) in enumerate(zip(plan.lambda_history, plan.sparsity_history))
        ],
        "threshold_used": plan.threshold_used,
        "target_rate": plan.target_rate,
        "achieved_rate": plan.achieved_rate,
        "flag": plan.flag,
    }


def _write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_report(report: dict, out_dir: str | Path, fmt: str = "json") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = out_dir / "report.json"
        path.write_text(json.dumps(report, indent=1) + "\n")
        return [path]
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    written = []
    for key in ("cardinality", "trajectory"):
        path = out_dir / f"{key}.csv"
        _write_csv(path, report[key])
        written.append(path)
    path = out_dir / "ledger.csv"
    path.write_text(accounting.report_csv(report["ledger"]))
    written.append(path)
    for item in report["confusion"]:
        path = out_dir / f"confusion_{item['from']}_{item['to']}.csv"
        _write_csv(path, [{f"g{j}": v for j, v in enumerate(row)} for row in item["matrix"]])
        written.append(path)
    return written
