"""Parameter and FLOP counts for architecture descriptions.

An architecture is a JSON object::

    {"name": "...", "input_shape": [C, H, W],
     "layers": [{"type": "conv", "name": "...", "c_in": 64, "c_out": 64, "k": 3,
                 "stride": 1, "padding": 1, "groups": 1, "bias": false,
                 "in_shape": [64, 56, 56]},            # in_shape optional
                {"type": "pool", "k": 3, "stride": 2, "padding": 1},
                {"type": "gap"}, {"type": "relu"},
                {"type": "linear", "in": 2048, "out": 1000, "bias": true}]}

Layers run in order and each takes the previous output shape unless it
declares ``in_shape`` (branch inputs such as shortcuts or dense
concatenations).  One multiply-accumulate counts as one FLOP; biases,
activations, pooling and normalization are free.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .regularizer import LayerSpec
from .structure import max_group_level

COST_FREE = {"pool", "gap", "relu", "bn", "add", "concat"}
BUNDLED = ("resnet20", "resnet56", "resnet110", "resnet50", "resnet101", "densenet201", "micronet")


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    flops: int
    c_in: int = 0
    c_out: int = 0
    k: int = 0
    groups: int = 1


def _out_hw(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def validate(spec: dict) -> None:
    if "layers" not in spec or "input_shape" not in spec:
        raise ValueError("architecture needs 'input_shape' and 'layers'")
    layer_costs(spec)


def layer_costs(spec: dict, levels=None) -> list[LayerCost]:
    """Walk the layers, tracking shapes; ``levels`` overrides conv group counts."""
    c, h, w = spec["input_shape"]
    out = []
    conv_idx = 0
    for i, layer in enumerate(spec["layers"]):
        kind = layer["type"]
        name = layer.get("name", f"{kind}{i}")
        if kind == "conv":
            if "in_shape" in layer:
                c, h, w = layer["in_shape"]
            k, stride = layer["k"], layer.get("stride", 1)
            pad = layer.get("padding", k // 2)
            groups = layer.get("groups", 1)
            if levels is not None:
                if conv_idx >= len(levels):
                    raise ValueError(f"fewer levels than convolutions (at {name})")
                groups = 1 << (levels[conv_idx] - 1)
            conv_idx += 1
            if layer["c_in"] != c:
                raise ValueError(f"{name}: expects {layer['c_in']} channels, receives {c}")
            if layer["c_in"] % groups or layer["c_out"] % groups:
                raise ValueError(f"{name}: {groups} groups do not divide the channels")
            h, w = _out_hw(h, k, stride, pad), _out_hw(w, k, stride, pad)
            weights = layer["c_in"] * layer["c_out"] * k * k // groups
            params = weights + (layer["c_out"] if layer.get("bias", False) else 0)
            out.append(LayerCost(name, kind, params, weights * h * w,
                                 layer["c_in"], layer["c_out"], k, groups))
            c = layer["c_out"]
        elif kind == "linear":
            if "in_shape" in layer:
                c, h, w = layer["in_shape"]
            if layer["in"] != c * h * w:
                raise ValueError(f"{name}: expects {layer['in']} features, receives {c * h * w}")
            weights = layer["in"] * layer["out"]
            params = weights + (layer["out"] if layer.get("bias", True) else 0)
            out.append(LayerCost(name, kind, params, weights))
            c, h, w = layer["out"], 1, 1
        elif kind == "pool":
            if "in_shape" in layer:
                c, h, w = layer["in_shape"]
            k, stride = layer["k"], layer.get("stride", layer["k"])
            pad = layer.get("padding", 0)
            h, w = _out_hw(h, k, stride, pad), _out_hw(w, k, stride, pad)
        elif kind == "gap":
            h = w = 1
        elif kind in COST_FREE:
            if "in_shape" in layer:
                c, h, w = layer["in_shape"]
        else:
            raise ValueError(f"unknown layer type {kind!r}")
    if levels is not None and conv_idx != len(levels):
        raise ValueError(f"{len(levels)} levels given for {conv_idx} convolutions")
    return out


def count_params(spec: dict) -> int:
    return sum(lc.params for lc in layer_costs(spec))


def count_flops(spec: dict) -> int:
    return sum(lc.flops for lc in layer_costs(spec))


def conv_layer_specs(spec: dict) -> list[LayerSpec]:
    return [
        LayerSpec(lc.name, lc.c_in, lc.c_out, lc.k)
        for lc in layer_costs(spec) if lc.kind == "conv"
    ]


def compression_report(spec: dict, levels) -> dict:
    """Dense versus grouped totals for per-convolution group levels.

    ``rate`` is the reduction of convolution weights (the quantity the
    sparsity controller tracks); ``param_reduction`` and ``flop_reduction``
    cover the whole network, biases and classifier included.
    """
    levels = list(levels)
    dense = layer_costs(spec)
    convs = [lc for lc in dense if lc.kind == "conv"]
    if len(levels) != len(convs):
        raise ValueError(f"{len(levels)} levels given for {len(convs)} convolutions")
    for lc, g in zip(convs, levels):
        if not 1 <= g <= max_group_level(lc.c_out, lc.c_in):
            raise ValueError(f"level {g} exceeds the capacity of {lc.name}")
    grouped = layer_costs(spec, levels)
    conv_w = sum(lc.c_in * lc.c_out * lc.k * lc.k for lc in convs)
    conv_w_grouped = sum(
        lc.c_in * lc.c_out * lc.k * lc.k // lc.groups for lc in grouped if lc.kind == "conv"
    )
    params_d, params_g = sum(x.params for x in dense), sum(x.params for x in grouped)
    flops_d, flops_g = sum(x.flops for x in dense), sum(x.flops for x in grouped)
    rows = []
    gi = iter(levels)
    for d, g in zip(dense, grouped):
        level = next(gi) if d.kind == "conv" else None
        rows.append({
            "name": d.name, "kind": d.kind, "group_level": level,
            "cardinality": g.groups if d.kind == "conv" else None,
            "params_dense": d.params, "params_grouped": g.params,
            "flops_dense": d.flops, "flops_grouped": g.flops,
        })
    return {
        "name": spec.get("name", ""),
        "params_dense": params_d, "params_grouped": params_g,
        "flops_dense": flops_d, "flops_grouped": flops_g,
        "rate": 1.0 - conv_w_grouped / conv_w,
        "param_reduction": 1.0 - params_g / params_d,
        "flop_reduction": 1.0 - flops_g / flops_d,
        "layers": rows,
    }


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    fields = list(report["layers"][0]) if report["layers"] else []
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(report["layers"])
    return buf.getvalue()


def load_arch(path_or_name: str | Path) -> dict:
    """Load an architecture JSON file, or a bundled one by name."""
    if str(path_or_name) in BUNDLED:
        text = resources.files("groupsparse").joinpath("archs", f"{path_or_name}.json").read_text()
    else:
        text = Path(path_or_name).read_text()
    spec = json.loads(text)
    validate(spec)
    return spec


# -- builders for the bundled architecture files --------------------------------

def _conv(name, c_in, c_out, k, stride=1, padding=None, in_shape=None, bias=False):
    d = {"type": "conv", "name": name, "c_in": c_in, "c_out": c_out, "k": k, "stride": stride,
         "padding": k // 2 if padding is None else padding, "groups": 1, "bias": bias}
    if in_shape is not None:
        d["in_shape"] = list(in_shape)
    return d


def resnet_imagenet(depth: int) -> dict:
    """Bottleneck ResNet with the stride on the 3x3 convolution."""
    blocks = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}[depth]
    layers = [_conv("conv1", 3, 64, 7, 2, 3), {"type": "relu"},
              {"type": "pool", "k": 3, "stride": 2, "padding": 1}]
    c, hw = 64, 56
    for stage, (n, width) in enumerate(zip(blocks, (64, 128, 256, 512)), start=1):
        for b in range(n):
            stride = 2 if b == 0 and stage > 1 else 1
            pre = f"layer{stage}.{b}"
            block_in = (c, hw, hw)
            layers += [
                _conv(f"{pre}.conv1", c, width, 1),
                _conv(f"{pre}.conv2", width, width, 3, stride),
                _conv(f"{pre}.conv3", width, width * 4, 1),
            ]
            hw //= stride
            if b == 0:
                layers.append(_conv(f"{pre}.downsample", c, width * 4, 1, stride, in_shape=block_in))
            layers.append({"type": "add"})
            c = width * 4
    layers += [{"type": "gap"}, {"type": "linear", "name": "fc", "in": c, "out": 1000, "bias": True}]
    return {"name": f"resnet{depth}", "input_shape": [3, 224, 224], "layers": layers}


def densenet_imagenet(blocks=(6, 12, 48, 32), growth: int = 32, init: int = 64,
                      bn_size: int = 4, name: str = "densenet201") -> dict:
    layers = [_conv("features.conv0", 3, init, 7, 2, 3), {"type": "relu"},
              {"type": "pool", "k": 3, "stride": 2, "padding": 1}]
    c, hw = init, 56
    for bi, n in enumerate(blocks, start=1):
        for li in range(1, n + 1):
            cin = c + (li - 1) * growth
            pre = f"denseblock{bi}.denselayer{li}"
            layers += [
                _conv(f"{pre}.conv1", cin, bn_size * growth, 1, in_shape=(cin, hw, hw)),
                _conv(f"{pre}.conv2", bn_size * growth, growth, 3),
            ]
        c += n * growth
        layers.append({"type": "concat", "in_shape": [c, hw, hw]})
        if bi < len(blocks):
            layers += [_conv(f"transition{bi}.conv", c, c // 2, 1),
                       {"type": "pool", "k": 2, "stride": 2}]
            c //= 2
            hw //= 2
    layers += [{"type": "gap"}, {"type": "linear", "name": "classifier", "in": c, "out": 1000,
                                 "bias": True}]
    return {"name": name, "input_shape": [3, 224, 224], "layers": layers}


def resnet_cifar(depth: int) -> dict:
    """Basic-block CIFAR ResNet (6n+2 layers) with 1x1 projection shortcuts."""
    n = (depth - 2) // 6
    layers = [_conv("conv1", 3, 16, 3)]
    c, hw = 16, 32
    for stage, width in enumerate((16, 32, 64), start=1):
        for b in range(n):
            stride = 2 if b == 0 and stage > 1 else 1
            pre = f"layer{stage}.{b}"
            block_in = (c, hw, hw)
            layers += [_conv(f"{pre}.conv1", c, width, 3, stride), _conv(f"{pre}.conv2", width, width, 3)]
            hw //= stride
            if c != width:
                layers.append(_conv(f"{pre}.shortcut", c, width, 1, stride, in_shape=block_in))
            layers.append({"type": "add"})
            c = width
    layers += [{"type": "gap"}, {"type": "linear", "name": "fc", "in": c, "out": 10, "bias": True}]
    return {"name": f"resnet{depth}", "input_shape": [3, 32, 32], "layers": layers}


def micronet_arch() -> dict:
    from .micronet import MICRONET_LAYERS, N_CLASSES

    layers = []
    for i, (c_in, c_out, k, stride) in enumerate(MICRONET_LAYERS, start=1):
        layers += [_conv(f"conv{i}", c_in, c_out, k, stride, bias=True), {"type": "relu"}]
    c_last = MICRONET_LAYERS[-1][1]
    layers += [{"type": "gap"}, {"type": "linear", "name": "fc", "in": c_last, "out": N_CLASSES,
                                 "bias": True}]
    return {"name": "micronet", "input_shape": [3, 16, 16], "layers": layers}


def bundled_builders() -> dict:
    return {
        "resnet20": lambda: resnet_cifar(20),
        "resnet56": lambda: resnet_cifar(56),
        "resnet110": lambda: resnet_cifar(110),
        "resnet50": lambda: resnet_imagenet(50),
        "resnet101": lambda: resnet_imagenet(101),
        "densenet201": densenet_imagenet,
        "micronet": micronet_arch,
    }


def write_bundled(directory: str | Path) -> None:
    directory = Path(directory)
    for name, build in bundled_builders().items():
        (directory / f"{name}.json").write_text(json.dumps(build(), indent=1) + "\n")
