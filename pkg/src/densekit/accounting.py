"""Parameter and multiply-accumulate counts straight from a NetworkSpec.

The closed-form walk below never builds a graph; ``graph_params`` and
``graph_macs`` walk a built ``LayerGraph`` instead, and the two must agree.
FLOPs are reported as 2 * MACs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

from densekit.builder.connectivity import connectivity_edges, full_dense_edges
from densekit.builder.spec import NetworkSpec, transition_width
from densekit.errors import ConfigError, DenseKitError

CSV_FIELDS = ("layer_name", "type", "in_ch", "out_ch", "params", "macs")
FLOP_CONVENTION = "flops = 2 * macs"


def _out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _spatial(input_shape) -> Tuple[int, int, int]:
    """(batch, H, W) from (H, W), (C, H, W) or (N, C, H, W)."""
    shape = tuple(int(v) for v in input_shape)
    if len(shape) == 2:
        return 1, shape[0], shape[1]
    if len(shape) == 3:
        return 1, shape[1], shape[2]
    if len(shape) == 4:
        return shape[0], shape[2], shape[3]
    raise ConfigError(f"input_shape: expected (H, W), (C, H, W) or (N, C, H, W), got {input_shape!r}")


def stem_resolution(spec: NetworkSpec, hw) -> Tuple[int, int]:
    h, w = hw
    if spec.stem == "imagenet":
        h, w = _out(h, 7, 2, 3), _out(w, 7, 2, 3)
        h, w = _out(h, 3, 2, 1), _out(w, 3, 2, 1)
    if h < 1 or w < 1:
        raise ConfigError(f"input_shape: {hw} is too small for the {spec.stem} stem")
    return h, w


def block_resolutions(spec: NetworkSpec, hw) -> List[Tuple[int, int]]:
    """Spatial extent seen by each dense block."""
    h, w = stem_resolution(spec, hw)
    out = []
    for j in range(len(spec.blocks)):
        out.append((h, w))
        if j < len(spec.blocks) - 1:
            if h < 2 or w < 2:
                raise ConfigError(f"input_shape: {hw} shrinks below 2x2 before transition {j + 1}")
            h, w = h // 2, w // 2
    return out


@dataclass
class Row:
    layer_name: str
    type: str
    in_ch: int
    out_ch: int
    params: int
    macs: int
    elementwise: int = 0
    block: int = 0


@dataclass
class CostReport:
    name: Optional[str]
    input_shape: tuple
    params: int
    macs: int
    flops: int
    depth: int
    edges: list
    total_edges: int
    elementwise: int
    rows: List[Row] = field(default_factory=list)
    flop_convention: str = FLOP_CONVENTION

    def block_macs(self) -> list:
        """MACs of each dense block (basic layers only)."""
        n = max((r.block for r in self.rows), default=0)
        return [sum(r.macs for r in self.rows if r.block == j and r.type in ("basic", "residual"))
                for j in range(1, n + 1)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["block_macs"] = self.block_macs()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.layer_name, r.type, r.in_ch, r.out_ch, r.params, r.macs])
        return buf.getvalue()

    def summary(self) -> str:
        return (f"{self.name or 'network'}: depth {self.depth}, params {self.params:,} "
                f"({self.params / 1e6:.2f}M), MACs {self.macs:,} ({FLOP_CONVENTION}: {self.flops:,})")


def _layer_rows(spec: NetworkSpec, hw) -> List[Row]:
    """The layer walk: one row per stem, basic layer, transition and classifier."""
    pre = spec.bn_placement == "pre"
    h, w = hw
    rows = []
    c0 = spec.stem_channels
    if spec.stem == "imagenet":
        ho, wo = _out(h, 7, 2, 3), _out(w, 7, 2, 3)
        rows.append(Row("stem", "stem", spec.in_channels, c0, 49 * spec.in_channels * c0 + 2 * c0,
                        49 * spec.in_channels * c0 * ho * wo, 2 * c0 * ho * wo + c0 * ho * wo))
        h, w = stem_resolution(spec, hw)
    else:
        bn = 0 if pre else 2 * c0
        rows.append(Row("stem", "stem", spec.in_channels, c0, 9 * spec.in_channels * c0 + bn,
                        9 * spec.in_channels * c0 * h * w, 0 if pre else 2 * c0 * h * w))
    width = c0
    for j, M in enumerate(spec.blocks):
        hw_ = h * w
        if spec.connectivity == "residual":
            for l in range(1, M + 1):
                c = width
                rows.append(Row(f"block{j + 1}.layer{l}", "residual", c, c, 4 * c + 18 * c * c,
                                18 * c * c * hw_, (4 * c + c) * hw_, j + 1))
        else:
            k = spec.growth_for_block(j)
            conn = connectivity_edges(spec.connectivity, M, spec.span)
            for l in range(1, M + 1):
                c = sum(width if s == 0 else k for s in conn.sources(l))
                if spec.bottleneck_mult:
                    b = spec.bottleneck_mult * k
                    bn = 2 * c + 2 * b if pre else 2 * b + 2 * k
                    params = c * b + 9 * b * k + bn
                    macs = (c * b + 9 * b * k) * hw_
                    elem = (2 * (c + b) if pre else 2 * (b + k)) * hw_
                else:
                    bn = 2 * c if pre else 2 * k
                    params = 9 * c * k + bn
                    macs = 9 * c * k * hw_
                    elem = (2 * c if pre else 2 * k) * hw_
                rows.append(Row(f"block{j + 1}.layer{l}", "basic", c, k, params, macs, elem, j + 1))
            width = width + k * M
        if j < len(spec.blocks) - 1:
            name = f"transition{j + 1}"
            if spec.full_dense:
                rows.append(Row(name, "pool", width, width, 0, 0, width * hw_))
            else:
                if spec.connectivity == "residual":
                    out, bn_ch = 2 * width, width
                else:
                    out = transition_width(width, spec.compression)
                    bn_ch = width if pre else out
                rows.append(Row(name, "transition", width, out, width * out + 2 * bn_ch, width * out * hw_,
                                2 * bn_ch * hw_ + width * hw_ if pre else 2 * out * hw_ + out * hw_))
                width = out
            h, w = h // 2, w // 2
    head_bn = 2 * width if (pre or spec.connectivity == "residual") else 0
    rows.append(Row("classifier", "linear", width, spec.classes, head_bn + width * spec.classes + spec.classes,
                    width * spec.classes, (head_bn + width) * h * w))
    return rows


def count_params(spec: NetworkSpec) -> int:
    """Learned parameters: conv kernels, BN gamma/beta, classifier weight and bias."""
    # parameters do not depend on resolution
    return sum(r.params for r in _layer_rows(spec, (1, 1)))


def count_macs(spec: NetworkSpec, input_shape) -> int:
    """Multiply-accumulates of one forward pass (times the batch, if given)."""
    n, h, w = _spatial(input_shape)
    block_resolutions(spec, (h, w))
    return n * sum(r.macs for r in _layer_rows(spec, (h, w)))


def count_flops(spec: NetworkSpec, input_shape) -> int:
    return 2 * count_macs(spec, input_shape)


def _edges(spec: NetworkSpec) -> list:
    return [len(connectivity_edges(spec.connectivity, M, spec.span)) for M in spec.blocks]


def describe(spec: NetworkSpec, input_shape=None) -> CostReport:
    """Parameter/MAC report with per-layer rows, depth and edge counts."""
    if input_shape is None:
        input_shape = (224, 224) if spec.stem == "imagenet" else (32, 32)
    n, h, w = _spatial(input_shape)
    block_resolutions(spec, (h, w))
    rows = _layer_rows(spec, (h, w))
    macs = n * sum(r.macs for r in rows)
    edges = _edges(spec)
    return CostReport(
        name=spec.name,
        input_shape=tuple(int(v) for v in input_shape),
        params=sum(r.params for r in rows),
        macs=macs,
        flops=2 * macs,
        depth=spec.depth,
        edges=edges,
        total_edges=full_dense_edges(spec.blocks) if spec.full_dense else sum(edges),
        elementwise=n * sum(r.elementwise for r in rows),
        rows=rows,
    )


# ------------------------------------------------------------------ graph walk


def graph_params(graph) -> int:
    return sum(p.data.size for p in graph.parameters())


def graph_macs(graph, input_shape) -> int:
    """MACs from the built graph's actual kernels and propagated spatial sizes."""
    from densekit.builder.graph import AvgPool, Conv, DenseBlock, MaxPool

    n, h, w = _spatial(input_shape)
    total = 0

    def walk(ops, h, w):
        nonlocal total
        for op in ops:
            if isinstance(op, Conv):
                cout, cin, kh, kw = op.weight.data.shape
                h, w = _out(h, kh, op.stride, op.pad), _out(w, kw, op.stride, op.pad)
                total += cout * cin * kh * kw * h * w
            elif isinstance(op, MaxPool):
                h, w = _out(h, op.k, op.stride, op.pad), _out(w, op.k, op.stride, op.pad)
            elif isinstance(op, AvgPool):
                h, w = h // 2, w // 2
        return h, w

    h, w = walk(graph.stem.ops, h, w)
    for stage in graph.stages:
        if isinstance(stage, DenseBlock):
            for layer in stage.layers:
                walk(layer.ops, h, w)
        else:
            h, w = walk(stage.ops, h, w)
    total += graph.head.weight.data.size
    return n * total


def cross_check(spec: NetworkSpec, input_shape=None, graph=None) -> CostReport:
    """describe() plus agreement with a built graph; raises on any mismatch."""
    from densekit.builder.graph import build

    report = describe(spec, input_shape)
    graph = graph if graph is not None else build(spec)
    if graph_params(graph) != report.params:
        raise DenseKitError(f"closed-form params {report.params} != graph {graph_params(graph)}")
    gm = graph_macs(graph, report.input_shape)
    if gm != report.macs:
        raise DenseKitError(f"closed-form MACs {report.macs} != graph {gm}")
    if graph.depth != report.depth:
        raise DenseKitError(f"spec depth {report.depth} != graph {graph.depth}")
    return report
