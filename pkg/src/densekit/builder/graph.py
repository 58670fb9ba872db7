"""Executable layer graphs built from a NetworkSpec.

A graph is a stem, an alternating list of dense blocks and transitions, and
a classifier head. Every stage is an ordered list of small op records
(``BN``, ``ReLU``, ``Conv``, ...) so pre- and post-activation variants are
the same structure with a different op order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from densekit.autodiff.tensor import BnState, Tensor, parameter, resolve_dtype
from densekit.builder.connectivity import ConnectivityGraph, connectivity_edges, full_dense_edges
from densekit.builder.spec import NetworkSpec, cifar_spec, imagenet_spec, transition_width
from densekit.errors import ConfigError


# ------------------------------------------------------------------ op records


@dataclass(eq=False)
class Conv:
    name: str
    weight: Tensor
    stride: int = 1
    pad: int = 0

    @property
    def out_channels(self) -> int:
        return self.weight.data.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.data.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.data.shape[2]


@dataclass(eq=False)
class BN:
    name: str
    state: BnState


@dataclass(eq=False)
class ReLU:
    pass


@dataclass(eq=False)
class Dropout:
    pass


@dataclass(eq=False)
class AvgPool:
    pass


@dataclass(eq=False)
class MaxPool:
    k: int = 3
    stride: int = 2
    pad: int = 1


Op = Union[Conv, BN, ReLU, Dropout, AvgPool, MaxPool]


def _conv(name, cin, cout, k, dtype, stride=1, pad=None) -> Conv:
    if pad is None:
        pad = k // 2
    return Conv(name, parameter(np.zeros((cout, cin, k, k), dtype=dtype), f"{name}.weight"), stride, pad)


def _bn(name, channels, dtype, eps, momentum) -> BN:
    return BN(name, BnState.create(channels, name, dtype=dtype, eps=eps, momentum=momentum))


# ------------------------------------------------------------------ stages


@dataclass(eq=False)
class Stage:
    name: str
    ops: List[Op]
    in_channels: int
    out_channels: int

    def convs(self) -> list:
        return [op for op in self.ops if isinstance(op, Conv)]

    def bns(self) -> list:
        return [op for op in self.ops if isinstance(op, BN)]

    def parameters(self) -> list:
        params = []
        for op in self.ops:
            if isinstance(op, Conv):
                params.append(op.weight)
            elif isinstance(op, BN):
                params.extend([op.state.gamma, op.state.beta])
        return params


@dataclass(eq=False)
class BasicLayer(Stage):
    """H_l: produces ``growth`` new maps from the concatenation of its sources."""

    index: int = 0
    growth: int = 0
    sources: tuple = ()

    @property
    def first_conv(self) -> Conv:
        return self.convs()[0]


@dataclass(eq=False)
class ResidualLayer(Stage):
    """x_l = H_l(x_{l-1}) + x_{l-1}; only used by the comparator networks."""

    index: int = 0


@dataclass(eq=False)
class Transition(Stage):
    pass


@dataclass(eq=False)
class DenseBlock:
    name: str
    index: int
    in_channels: int
    growth: int
    layers: list
    connectivity: ConnectivityGraph

    @property
    def residual(self) -> bool:
        return self.connectivity.pattern == "residual"

    @property
    def out_channels(self) -> int:
        if self.residual:
            return self.in_channels
        return self.in_channels + self.growth * len(self.layers)

    def source_width(self, s: int) -> int:
        return self.in_channels if s == 0 else self.growth

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def __len__(self):
        return len(self.layers)


@dataclass(eq=False)
class Head:
    ops: List[Op]
    in_channels: int
    weight: Tensor
    bias: Tensor

    @property
    def classes(self) -> int:
        return self.weight.data.shape[0]

    def parameters(self) -> list:
        params = []
        for op in self.ops:
            if isinstance(op, BN):
                params.extend([op.state.gamma, op.state.beta])
        return params + [self.weight, self.bias]


@dataclass(eq=False)
class LayerGraph:
    spec: NetworkSpec
    dtype: np.dtype
    stem: Stage
    stages: list
    head: Head

    @property
    def blocks(self) -> list:
        return [s for s in self.stages if isinstance(s, DenseBlock)]

    @property
    def transitions(self) -> list:
        return [s for s in self.stages if isinstance(s, Transition)]

    def named_parameters(self) -> list:
        """(name, tensor) pairs in graph order."""
        params = list(self.stem.parameters())
        for stage in self.stages:
            params.extend(stage.parameters())
        params.extend(self.head.parameters())
        return [(p.name, p) for p in params]

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def bn_states(self) -> list:
        out = list(op.state for op in self.stem.bns())
        for stage in self.stages:
            layers = stage.layers if isinstance(stage, DenseBlock) else [stage]
            for layer in layers:
                out.extend(op.state for op in layer.bns())
        out.extend(op.state for op in self.head.ops if isinstance(op, BN))
        return out

    def weighted_layers(self) -> list:
        """Names of every convolution and the classifier, in order."""
        names = [c.name for c in self.stem.convs()]
        for stage in self.stages:
            layers = stage.layers if isinstance(stage, DenseBlock) else [stage]
            for layer in layers:
                names.extend(c.name for c in layer.convs())
        names.append("classifier")
        return names

    @property
    def depth(self) -> int:
        return len(self.weighted_layers())

    def edge_counts(self) -> list:
        return [len(b.connectivity) for b in self.blocks]

    def audit(self):
        """Check every declared channel count against what feeds it."""
        width = self.stem.out_channels
        if self.stem.convs()[0].in_channels != self.spec.in_channels:
            raise ConfigError("stem conv does not match the input channel count")
        for stage in self.stages:
            if stage.in_channels != width:
                raise ConfigError(f"{stage.name} declares {stage.in_channels} input channels but receives {width}")
            if isinstance(stage, DenseBlock):
                for layer in stage.layers:
                    if stage.residual:
                        expect = stage.in_channels
                    else:
                        expect = sum(stage.source_width(s) for s in layer.sources)
                    if layer.in_channels != expect:
                        raise ConfigError(
                            f"{layer.name} declares {layer.in_channels} input channels, sources give {expect}"
                        )
                    _audit_ops(layer)
            else:
                _audit_ops(stage)
            width = stage.out_channels
        if self.head.in_channels != width or self.head.weight.data.shape[1] != width:
            raise ConfigError(f"classifier expects {self.head.in_channels} channels, network gives {width}")
        return True


def _audit_ops(stage: Stage):
    width = stage.in_channels
    for op in stage.ops:
        if isinstance(op, Conv):
            if op.in_channels != width:
                raise ConfigError(f"{op.name} reads {op.in_channels} channels but is fed {width}")
            width = op.out_channels
        elif isinstance(op, BN) and op.state.channels != width:
            raise ConfigError(f"{op.name} normalizes {op.state.channels} channels but is fed {width}")
    if width != stage.out_channels:
        raise ConfigError(f"{stage.name} produces {width} channels, declares {stage.out_channels}")


# ------------------------------------------------------------------ builders


def input_channels(k0: int, k: int, layer: int) -> int:
    """Concatenated input width of layer ``layer`` in a dense block."""
    if layer < 1:
        raise ConfigError(f"layer index must be >= 1, got {layer}")
    return k0 + k * (layer - 1)


def _with_dropout(ops: list, dropout: str) -> list:
    """Insert dropout after convs per placement ('each-conv', 'last-conv' or '')."""
    if not dropout:
        return ops
    conv_idx = [i for i, op in enumerate(ops) if isinstance(op, Conv)]
    chosen = conv_idx if dropout == "each-conv" else conv_idx[-1:]
    out = []
    for i, op in enumerate(ops):
        out.append(op)
        if i in chosen:
            out.append(Dropout())
    return out


def build_basic_layer(in_channels: int, k: int, m: int, bn_placement: str = "pre", *, name: str = "layer",
                      dtype=np.float64, eps: float = 1e-5, momentum: float = 0.1, dropout: str = "",
                      index: int = 0, sources: tuple = ()) -> BasicLayer:
    """Bottlenecked composite BN-ReLU-Conv1x1-BN-ReLU-Conv3x3 (or its post-activation order)."""
    if in_channels < 1:
        raise ConfigError(f"in_channels must be >= 1, got {in_channels}")
    dtype = resolve_dtype(dtype)
    if m > 0:
        width = m * k
        c1 = _conv(f"{name}.conv1", in_channels, width, 1, dtype)
        c2 = _conv(f"{name}.conv2", width, k, 3, dtype)
        if bn_placement == "pre":
            ops = [_bn(f"{name}.bn1", in_channels, dtype, eps, momentum), ReLU(), c1,
                   _bn(f"{name}.bn2", width, dtype, eps, momentum), ReLU(), c2]
        else:
            ops = [c1, _bn(f"{name}.bn1", width, dtype, eps, momentum), ReLU(),
                   c2, _bn(f"{name}.bn2", k, dtype, eps, momentum), ReLU()]
    else:
        c = _conv(f"{name}.conv", in_channels, k, 3, dtype)
        if bn_placement == "pre":
            ops = [_bn(f"{name}.bn", in_channels, dtype, eps, momentum), ReLU(), c]
        else:
            ops = [c, _bn(f"{name}.bn", k, dtype, eps, momentum), ReLU()]
    return BasicLayer(name, _with_dropout(ops, dropout), in_channels, k, index=index, growth=k, sources=sources)


def build_transition(in_channels: int, theta: float, bn_placement: str = "pre", *, name: str = "transition",
                     dtype=np.float64, eps: float = 1e-5, momentum: float = 0.1, dropout: str = "",
                     out_channels: Optional[int] = None) -> Transition:
    """BN-ReLU-Conv1x1 to floor(theta * in) maps, then 2x2 average pooling."""
    if in_channels < 1:
        raise ConfigError(f"in_channels must be >= 1, got {in_channels}")
    dtype = resolve_dtype(dtype)
    out = transition_width(in_channels, theta) if out_channels is None else out_channels
    conv = _conv(f"{name}.conv", in_channels, out, 1, dtype)
    if bn_placement == "pre":
        ops = [_bn(f"{name}.bn", in_channels, dtype, eps, momentum), ReLU(), conv]
    else:
        ops = [conv, _bn(f"{name}.bn", out, dtype, eps, momentum), ReLU()]
    return Transition(name, _with_dropout(ops, dropout) + [AvgPool()], in_channels, out)


def build_pool_transition(channels: int, name: str = "transition") -> Transition:
    """Parameter-free downsampling used by full dense connectivity."""
    return Transition(name, [AvgPool()], channels, channels)


def build_residual_layer(channels: int, *, out_channels: Optional[int] = None, name: str = "res",
                         dtype=np.float64, eps: float = 1e-5, momentum: float = 0.1, dropout: str = "",
                         index: int = 0) -> ResidualLayer:
    """Pre-activation BN-ReLU-Conv3x3-BN-ReLU-Conv3x3 with an identity shortcut."""
    if out_channels is not None and out_channels != channels:
        raise ConfigError(f"residual layer needs equal input/output channels, got {channels} -> {out_channels}")
    if channels < 1:
        raise ConfigError(f"channels must be >= 1, got {channels}")
    dtype = resolve_dtype(dtype)
    ops = [_bn(f"{name}.bn1", channels, dtype, eps, momentum), ReLU(), _conv(f"{name}.conv1", channels, channels, 3, dtype),
           _bn(f"{name}.bn2", channels, dtype, eps, momentum), ReLU(), _conv(f"{name}.conv2", channels, channels, 3, dtype)]
    return ResidualLayer(name, _with_dropout(ops, dropout), channels, channels, index=index)


def _build_stem(spec: NetworkSpec, dtype) -> Stage:
    c = spec.stem_channels
    eps, mom = spec.bn_eps, spec.bn_momentum
    if spec.stem == "imagenet":
        conv = _conv("stem.conv", spec.in_channels, c, 7, dtype, stride=2, pad=3)
        ops = [conv, _bn("stem.bn", c, dtype, eps, mom), ReLU(), MaxPool(3, 2, 1)]
    else:
        conv = _conv("stem.conv", spec.in_channels, c, 3, dtype)
        ops = [conv]
        if spec.bn_placement == "post":
            ops += [_bn("stem.bn", c, dtype, eps, mom), ReLU()]
    return Stage("stem", ops, spec.in_channels, c)


def build(spec: NetworkSpec, dtype="float64", seed: Optional[int] = None) -> LayerGraph:
    """Build the layer graph for ``spec``; weights are zero unless ``seed`` is given."""
    dtype = resolve_dtype(dtype)
    eps, mom = spec.bn_eps, spec.bn_momentum
    drop = spec.dropout_placement if spec.dropout_rate > 0 else ""
    stem = _build_stem(spec, dtype)
    width = stem.out_channels
    stages = []
    for j, m in enumerate(spec.blocks):
        bname = f"block{j + 1}"
        if spec.connectivity == "residual":
            conn = connectivity_edges("residual", m)
            layers = [build_residual_layer(width, name=f"{bname}.layer{i}", dtype=dtype, eps=eps, momentum=mom,
                                           dropout=drop, index=i) for i in range(1, m + 1)]
            block = DenseBlock(bname, j + 1, width, 0, layers, conn)
        else:
            k = spec.growth_for_block(j)
            conn = connectivity_edges(spec.connectivity, m, spec.span)
            layers = []
            for i in range(1, m + 1):
                src = conn.sources(i)
                cin = sum(width if s == 0 else k for s in src)
                layers.append(build_basic_layer(cin, k, spec.bottleneck_mult, spec.bn_placement,
                                                name=f"{bname}.layer{i}", dtype=dtype, eps=eps, momentum=mom,
                                                dropout=drop, index=i, sources=src))
            block = DenseBlock(bname, j + 1, width, k, layers, conn)
        stages.append(block)
        width = block.out_channels
        if j < len(spec.blocks) - 1:
            tname = f"transition{j + 1}"
            if spec.full_dense:
                trans = build_pool_transition(width, tname)
            elif spec.connectivity == "residual":
                # residual comparators widen at each downsampling step
                trans = build_transition(width, 1.0, "pre", name=tname, dtype=dtype, eps=eps, momentum=mom,
                                         dropout=drop, out_channels=2 * width)
            else:
                trans = build_transition(width, spec.compression, spec.bn_placement, name=tname, dtype=dtype,
                                         eps=eps, momentum=mom, dropout=drop)
            stages.append(trans)
            width = trans.out_channels
    head_ops = []
    if spec.bn_placement == "pre" or spec.connectivity == "residual":
        head_ops = [_bn("head.bn", width, dtype, eps, mom), ReLU()]
    head = Head(head_ops, width,
                parameter(np.zeros((spec.classes, width), dtype=dtype), "classifier.weight"),
                parameter(np.zeros(spec.classes, dtype=dtype), "classifier.bias"))
    graph = LayerGraph(spec, dtype, stem, stages, head)
    graph.audit()
    if seed is not None:
        from densekit.train.init import init_weights

        init_weights(graph, seed)
    return graph


def build_cifar(M: int, k: int, theta: float = 0.5, m: int = 4, *, classes: int = 10, dtype="float64",
                seed: Optional[int] = None, **kw) -> LayerGraph:
    return build(cifar_spec(layers=M, growth=k, compression=theta, bottleneck_mult=m, classes=classes, **kw),
                 dtype, seed)


def build_imagenet(preset=121, k: int = 32, *, classes: int = 1000, dtype="float64",
                   seed: Optional[int] = None, **kw) -> LayerGraph:
    return build(imagenet_spec(preset, growth=k, classes=classes, **kw), dtype, seed)


def build_fdc(spec: NetworkSpec, dtype="float64", seed: Optional[int] = None) -> LayerGraph:
    """Full dense connectivity: transitions reduced to pooling, no compression."""
    if spec.connectivity != "dense":
        raise ConfigError(f"full dense connectivity requires the dense pattern, got {spec.connectivity!r}")
    return build(spec.replace(full_dense=True), dtype, seed)


def total_edges(graph: LayerGraph) -> int:
    """Direct connections: per-block edges, or network-wide ones under full dense connectivity."""
    if graph.spec.full_dense:
        return full_dense_edges(graph.spec.blocks)
    return sum(graph.edge_counts())
