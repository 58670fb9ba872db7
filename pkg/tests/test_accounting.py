import csv
import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densekit.accounting import (count_flops, count_macs, count_params, cross_check, describe, graph_macs,
                                 graph_params)
from densekit.builder import NetworkSpec, build, cifar_spec, imagenet_spec, preset
from densekit.errors import ConfigError

from oracles import cifar_params, imagenet_121_macs

# exact integers produced by the layer-walk oracle in oracles.py
FROZEN_PARAMS = {
    "densenet-bc-100-12": 769_162,
    "densenet-bc-250-24": 15_324_406,
    "densenet-bc-190-40": 25_624_430,
    "densenet121": 7_978_856,
}
DENSENET121_MACS_224 = 2_834_161_664


@pytest.mark.parametrize("name,M,k", [("densenet-bc-100-12", 16, 12), ("densenet-bc-250-24", 41, 24),
                                      ("densenet-bc-190-40", 31, 40)])
def test_cifar_params_against_oracle(name, M, k):
    assert cifar_params(M, k) == FROZEN_PARAMS[name] == count_params(preset(name))


def test_densenet121_frozen():
    spec = preset("densenet121")
    assert count_params(spec) == FROZEN_PARAMS["densenet121"]
    assert imagenet_121_macs() == DENSENET121_MACS_224 == count_macs(spec, (224, 224))
    assert graph_macs(build(spec), (1, 3, 224, 224)) == DENSENET121_MACS_224
    assert count_flops(spec, (224, 224)) == 2 * DENSENET121_MACS_224


def test_single_conv_macs():
    # the bottleneck conv of DenseNet-121 block 1: 1x1, 64 -> 128, at 56x56
    from densekit.builder import build_basic_layer
    layer = build_basic_layer(64, 32, 4)
    cout, cin, kh, kw = layer.convs()[0].weight.data.shape
    assert cout * cin * kh * kw * 56 * 56 == 25_690_112
    rows = describe(imagenet_spec(121), (224, 224)).rows
    first = next(r for r in rows if r.layer_name == "block1.layer1")
    assert first.macs == 64 * 128 * 56 * 56 + 128 * 32 * 9 * 56 * 56


def test_batch_multiplies_macs():
    spec = cifar_spec(40, 12)
    assert count_macs(spec, (4, 3, 32, 32)) == 4 * count_macs(spec, (32, 32))


def test_compression_monotone_macs():
    a = count_macs(cifar_spec(40, 12, compression=1.0), (32, 32))
    b = count_macs(cifar_spec(40, 12, compression=0.5), (32, 32))
    assert a > b


def test_describe_report():
    r = describe(NetworkSpec(blocks=(5,), growth=4))
    assert r.edges == [15] and r.total_edges == 15
    d = json.loads(r.to_json())
    assert d["flop_convention"] == "flops = 2 * macs" and d["flops"] == 2 * d["macs"]
    rows = list(csv.DictReader(io.StringIO(r.to_csv())))
    assert list(rows[0]) == ["layer_name", "type", "in_ch", "out_ch", "params", "macs"]
    assert sum(int(x["params"]) for x in rows) == r.params
    r121 = cross_check(preset("densenet121"))
    assert r121.depth == 121 and r121.params == graph_params(build(preset("densenet121")))


def test_input_shape_errors():
    with pytest.raises(ConfigError):
        count_macs(preset("densenet121"), (8, 8))
    with pytest.raises(ConfigError):
        count_macs(cifar_spec(40, 12), (1, 2, 3, 4, 5))


SPEC_STRATEGY = st.builds(
    NetworkSpec,
    blocks=st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
    growth=st.integers(2, 12),
    growth_schedule=st.sampled_from(("constant", "exponential")),
    bottleneck_mult=st.integers(0, 4),
    compression=st.sampled_from((0.25, 0.3, 0.5, 0.7, 1.0)),
    connectivity=st.sampled_from(("dense", "last-m", "parity", "power-of-two", "residual")),
    span=st.integers(1, 4),
    bn_placement=st.sampled_from(("pre", "post")),
    stem=st.sampled_from(("cifar", "imagenet")),
    classes=st.integers(1, 20),
)


@settings(max_examples=50, deadline=None, derandomize=True)
@given(spec=SPEC_STRATEGY)
def test_prop_closed_form_equals_graph_walk(spec):
    size = 64 if spec.stem == "imagenet" else 32
    if len(spec.blocks) == 4 and spec.stem == "imagenet":
        size = 128
    g = build(spec)
    r = describe(spec, (2, 3, size, size))
    assert r.params == graph_params(g)
    assert r.macs == graph_macs(g, (2, 3, size, size))
    assert r.depth == g.depth


@settings(max_examples=50, deadline=None, derandomize=True)
@given(spec=SPEC_STRATEGY.filter(lambda s: s.connectivity != "residual"),
       field=st.sampled_from(("growth", "bottleneck_mult", "compression", "blocks")))
def test_prop_params_monotone(spec, field):
    if field == "growth":
        bigger = spec.replace(growth=spec.growth + 1)
    elif field == "bottleneck_mult":
        # m = 0 removes the bottleneck conv altogether, so widening is only comparable from m = 1 up
        spec = spec.replace(bottleneck_mult=max(1, spec.bottleneck_mult))
        bigger = spec.replace(bottleneck_mult=spec.bottleneck_mult + 1)
    elif field == "compression":
        bigger = spec.replace(compression=min(1.0, spec.compression + 0.25))
    else:
        bigger = spec.replace(blocks=spec.blocks[:-1] + (spec.blocks[-1] + 1,))
    assert count_params(bigger) >= count_params(spec)


def test_exponential_growth_concentrates_macs_late():
    base = NetworkSpec(blocks=(4, 4, 4), growth=8)
    expo = base.replace(growth_schedule="exponential")
    assert expo.depth == base.depth
    a, b = describe(base).block_macs(), describe(expo).block_macs()
    assert sum(b) > sum(a)
    assert b[-1] > a[-1]
    assert b[-1] / sum(b) > a[-1] / sum(a)


def test_fdc_and_variants_cross_check():
    for spec in (NetworkSpec(blocks=(2, 3), growth=4, full_dense=True),
                 NetworkSpec(blocks=(3, 3), growth=4, connectivity="residual"),
                 NetworkSpec(blocks=(3,), growth=4, bottleneck_mult=0, bn_placement="post")):
        cross_check(spec)
