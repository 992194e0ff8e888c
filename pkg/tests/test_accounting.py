import json
from pathlib import Path

import pytest

from groupsparse import accounting
from groupsparse.accounting import (
    bundled_builders, compression_report, conv_layer_specs, count_flops, count_params, load_arch,
    report_csv,
)
from groupsparse.regularizer import model_sparsity

ARCH_DIR = Path(accounting.__file__).parent / "archs"


def single_conv(groups=1, bias=False, size=16):
    return {"name": "one", "input_shape": [16, size, size],
            "layers": [{"type": "conv", "c_in": 16, "c_out": 16, "k": 3, "stride": 1, "padding": 1,
                        "groups": groups, "bias": bias}]}


def test_single_conv_counts():
    assert count_params(single_conv()) == 2304
    assert count_params(single_conv(4)) == 576
    assert count_params(single_conv(bias=True)) == 2320
    assert count_flops(single_conv()) == 589_824
    assert count_flops(single_conv(2)) == 589_824 // 2


def test_linear_pool_and_strides():
    spec = {"input_shape": [3, 32, 32], "layers": [
        {"type": "conv", "c_in": 3, "c_out": 8, "k": 3, "stride": 2, "padding": 1},
        {"type": "relu"},
        {"type": "pool", "k": 2, "stride": 2},
        {"type": "conv", "c_in": 8, "c_out": 8, "k": 1, "padding": 0},
        {"type": "gap"},
        {"type": "linear", "in": 8, "out": 10},
    ]}
    assert count_params(spec) == 3 * 8 * 9 + 64 + 80 + 10
    assert count_flops(spec) == 3 * 8 * 9 * 16 * 16 + 64 * 8 * 8 + 80


def test_invalid_specs():
    bad_chain = single_conv()
    bad_chain["layers"].append({"type": "conv", "c_in": 8, "c_out": 8, "k": 1})
    with pytest.raises(ValueError):
        count_params(bad_chain)
    with pytest.raises(ValueError):
        count_params(single_conv(groups=3))
    with pytest.raises(ValueError):
        count_params({"input_shape": [1, 1, 1], "layers": [{"type": "lstm"}]})
    with pytest.raises(ValueError):
        accounting.validate({"layers": []})


def test_bundled_files_match_builders():
    for name, build in bundled_builders().items():
        assert json.loads((ARCH_DIR / f"{name}.json").read_text()) == build(), name
        assert load_arch(name) == build()


def test_imagenet_baselines():
    r50 = load_arch("resnet50")
    assert count_params(r50) == pytest.approx(25.6e6, rel=0.01)
    assert count_flops(r50) == pytest.approx(4.14e9, rel=0.05)
    d201 = load_arch("densenet201")
    assert count_params(d201) == pytest.approx(20.0e6, rel=0.02)
    assert count_flops(d201) == pytest.approx(4.39e9, rel=0.05)
    # ResNet-101 is not gated but should sit near its usual 44.5M / 7.8G
    r101 = load_arch("resnet101")
    assert count_params(r101) == pytest.approx(44.5e6, rel=0.01)


def test_cifar_resnets_are_informational():
    # the common ResNet-20 construction; a smaller published variant is not reconstructible
    assert count_params(load_arch("resnet20")) == pytest.approx(0.27e6, rel=0.01)


def test_report_trivial_rates():
    spec = {"input_shape": [16, 8, 8], "layers": [
        {"type": "conv", "c_in": 16, "c_out": 32, "k": 3},
        {"type": "conv", "c_in": 32, "c_out": 32, "k": 1},
    ]}
    assert compression_report(spec, [1, 1])["rate"] == 0
    rep = compression_report(spec, [2, 2])
    assert rep["rate"] == 0.5 and rep["param_reduction"] == 0.5 and rep["flop_reduction"] == 0.5
    assert [row["cardinality"] for row in rep["layers"]] == [2, 2]
    with pytest.raises(ValueError):
        compression_report(spec, [7, 1])
    with pytest.raises(ValueError):
        compression_report(spec, [1])


def test_report_matches_model_sparsity_on_micronet():
    spec = load_arch("micronet")
    specs = conv_layer_specs(spec)
    for levels in ([1, 1, 1], [1, 2, 3], [1, 5, 6], [1, 3, 2]):
        assert compression_report(spec, levels)["rate"] == pytest.approx(
            model_sparsity(levels, specs), abs=1e-15)


def test_per_layer_reduction_exact():
    spec = load_arch("resnet50")
    convs = [c for c in accounting.layer_costs(spec) if c.kind == "conv"]
    levels = [min(3, spec_.capacity) for spec_ in conv_layer_specs(spec)]
    grouped = [c for c in accounting.layer_costs(spec, levels) if c.kind == "conv"]
    for d, g, lv in zip(convs, grouped, levels):
        assert g.params * 2 ** (lv - 1) == d.params
        assert g.flops * 2 ** (lv - 1) == d.flops


def test_report_csv():
    text = report_csv(compression_report(load_arch("micronet"), [1, 2, 3]))
    lines = text.strip().splitlines()
    assert lines[0].startswith("name,kind,group_level")
    assert len(lines) == 1 + 4  # three convolutions and the classifier
