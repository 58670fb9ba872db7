"""Run a layer graph forward (and record it for backward) under a memory strategy.

All strategies execute the same primitives in the same order on the same
values, so losses and gradients agree bit for bit; only where the bytes
live differs.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from densekit.autodiff import ops
from densekit.autodiff.tape import Tape
from densekit.autodiff.tensor import Tensor, Workspace
from densekit.builder.graph import AvgPool, BN, Conv, DenseBlock, Dropout, LayerGraph, MaxPool, ReLU
from densekit.errors import ConfigError, PlanBugError, UsageError
from densekit.memory.plan import STRATEGIES, BlockShape, NetworkPlan

_locks: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
_locks_guard = threading.Lock()


@contextmanager
def exclusive(graph):
    """Refuse concurrent execution of one graph instance (its buffers are shared)."""
    with _locks_guard:
        lock = _locks.setdefault(graph, threading.Lock())
    if not lock.acquire(blocking=False):
        raise UsageError("graph is already being executed; one graph instance runs one pass at a time")
    try:
        yield
    finally:
        lock.release()


@dataclass
class Context:
    training: bool
    tape: Optional[Tape] = None
    rng: Optional[np.random.Generator] = None
    dropout_rate: float = 0.0


def apply_ops(op_list, x: Tensor, ctx: Context, workspace: Optional[Workspace] = None) -> Tensor:
    for op in op_list:
        if isinstance(op, Conv):
            x = ops.conv2d(x, op.weight, op.stride, op.pad, tape=ctx.tape)
        elif isinstance(op, BN):
            x = ops.batch_norm(x, op.state, ctx.training, tape=ctx.tape, workspace=workspace)
        elif isinstance(op, ReLU):
            x = ops.relu(x, tape=ctx.tape)
        elif isinstance(op, Dropout):
            x = ops.dropout(x, ctx.dropout_rate, ctx.rng, ctx.training, tape=ctx.tape)
        elif isinstance(op, AvgPool):
            x = ops.avg_pool2(x, tape=ctx.tape)
        elif isinstance(op, MaxPool):
            x = ops.max_pool(x, op.k, op.stride, op.pad, tape=ctx.tape)
        else:
            raise ConfigError(f"unknown op record {op!r}")
    return x


def run_block(block: DenseBlock, x0: Tensor, ctx: Context, strategy: str = "naive") -> Tensor:
    """Execute one block; returns its output feature tensor."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy: {strategy!r} is not one of {list(STRATEGIES)}")
    tape = ctx.tape
    if block.residual:
        if strategy != "naive":
            BlockShape.from_block(block)  # raises the unsupported-strategy error
        h = x0
        for layer in block.layers:
            h = ops.add(apply_ops(layer.ops, h, ctx), h, tape=tape)
        return h

    if strategy == "naive":
        if block.connectivity.pattern == "dense":
            state = x0
            for layer in block.layers:
                out = apply_ops(layer.ops, state, ctx)
                state = ops.concat_channels([state, out], tape=tape)
            return state
        feats = [x0]
        for layer in block.layers:
            src = [feats[s] for s in layer.sources]
            inp = src[0] if len(src) == 1 else ops.concat_channels(src, tape=tape)
            feats.append(apply_ops(layer.ops, inp, ctx))
        return ops.concat_channels(feats, tape=tape)

    shape = BlockShape.from_block(block)
    n, _, h, w = x0.data.shape
    buffer = np.empty((n, shape.out_width, h, w), dtype=x0.data.dtype)
    workspace = None
    if strategy == "shared+recompute":
        workspace = Workspace(n * shape.workspace_width * h * w, x0.data.dtype)
    sources = [ops.buffer_write(x0, buffer, 0, tape=tape)]
    for l, layer in enumerate(block.layers, 1):
        view = ops.channel_view(buffer, sources, tape=tape)
        out = apply_ops(layer.ops, view, ctx, workspace=workspace)
        sources.append(ops.buffer_write(out, buffer, shape.input_width(l), tape=tape))
    if workspace is not None:
        # nothing in the workspace survives the block: backward recomputes each entry once
        workspace.release()
    return ops.channel_view(buffer, sources, tape=tape)


@dataclass
class Forward:
    logits: np.ndarray
    loss: Optional[Tensor] = None
    features: Optional[Tensor] = None
    input: Optional[Tensor] = None
    tape: Optional[Tape] = None
    block_outputs: list = field(default_factory=list)


def run(graph: LayerGraph, x, labels=None, *, strategy: str = "naive", training: bool = False,
        tape: Optional[Tape] = None, rng: Optional[np.random.Generator] = None,
        input_grad: bool = False) -> Forward:
    """Forward pass through the whole network; records on ``tape`` when given."""
    x = np.asarray(x, dtype=graph.dtype)
    if x.ndim != 4 or x.shape[1] != graph.spec.in_channels:
        raise ConfigError(
            f"input must be (N, {graph.spec.in_channels}, H, W), got shape {tuple(x.shape)}"
        )
    ctx = Context(training, tape, rng, graph.spec.dropout_rate)
    with exclusive(graph):
        xin = Tensor(x, name="input", requires_grad=input_grad)
        h = apply_ops(graph.stem.ops, xin, ctx)
        outs = []
        for stage in graph.stages:
            if isinstance(stage, DenseBlock):
                h = run_block(stage, h, ctx, strategy)
                outs.append(h)
            else:
                h = apply_ops(stage.ops, h, ctx)
        h = apply_ops(graph.head.ops, h, ctx)
        feat = ops.global_avg_pool(h, tape=tape)
        if labels is None:
            return Forward(ops.linear(feat, graph.head.weight, graph.head.bias), None, feat, xin, tape, outs)
        loss, logits = ops.linear_softmax_xent(feat, graph.head.weight, graph.head.bias, labels, tape=tape,
                                               return_logits=True)
        return Forward(logits, loss, feat, xin, tape, outs)


def predict(graph: LayerGraph, x, batch: int = 256) -> np.ndarray:
    """Eval-mode logits, in chunks."""
    x = np.asarray(x)
    parts = [run(graph, x[i:i + batch]).logits for i in range(0, len(x), batch)]
    return np.concatenate(parts) if parts else np.zeros((0, graph.spec.classes), dtype=graph.dtype)


def loss_and_grads(graph: LayerGraph, x, labels, *, strategy: str = "naive",
                   rng: Optional[np.random.Generator] = None, training: bool = True):
    """(Forward, tape) after one recorded forward and backward pass; grads land on ``.grad``."""
    for p in graph.parameters():
        p.grad = None
    tape = Tape()
    fwd = run(graph, x, labels, strategy=strategy, training=training, tape=tape, rng=rng)
    tape.backward(fwd.loss)
    return fwd, tape


@dataclass
class Execution:
    outputs: np.ndarray
    loss: Optional[float]
    gradients: Dict[str, np.ndarray]
    recompute_counts: dict
    recompute_nodes: int


def check_plan(graph: LayerGraph, plan: NetworkPlan, input_shape) -> None:
    """Confirm ``plan`` was made for this graph, batch, resolution and element width."""
    from densekit.accounting import block_resolutions

    if len(plan.blocks) != len(graph.blocks):
        raise PlanBugError(f"plan covers {len(plan.blocks)} blocks, graph has {len(graph.blocks)}")
    n, _, h, w = input_shape
    sizes = block_resolutions(graph.spec, (h, w))
    for i, (p, block, (bh, bw)) in enumerate(zip(plan.blocks, graph.blocks, sizes)):
        if not p.verified:
            raise PlanBugError(f"plan for {block.name} has not been verified")
        if p.shape != BlockShape.from_block(block):
            raise PlanBugError(f"plan for block {i + 1} has shape {p.shape}, graph block is "
                               f"{BlockShape.from_block(block)}")
        if (p.batch, p.height, p.width) != (n, bh, bw):
            raise PlanBugError(f"plan for block {i + 1} assumes batch {p.batch} at {p.height}x{p.width}, "
                               f"input gives batch {n} at {bh}x{bw}")
        if p.elem_bytes != graph.dtype.itemsize:
            raise PlanBugError(f"plan uses {p.elem_bytes}-byte elements, graph stores {graph.dtype.itemsize}")


def execute_with_plan(graph: LayerGraph, plan, inputs, labels=None,
                      rng: Optional[np.random.Generator] = None) -> Execution:
    """Execute under ``plan`` (a NetworkPlan or a strategy name).

    With labels and a training plan this runs forward and backward and
    returns every parameter gradient by name.
    """
    inputs = np.asarray(inputs)
    if isinstance(plan, str):
        strategy, training = plan, labels is not None
    else:
        check_plan(graph, plan, inputs.shape)
        strategy, training = plan.strategy, plan.mode == "training"
    if not training:
        fwd = run(graph, inputs, labels, strategy=strategy)
        return Execution(fwd.logits, None if fwd.loss is None else float(fwd.loss.data), {}, {}, 0)
    if labels is None:
        raise UsageError("a training plan needs labels to form the loss")
    fwd, tape = loss_and_grads(graph, inputs, labels, strategy=strategy, rng=rng)
    grads = {name: p.grad for name, p in graph.named_parameters() if p.grad is not None}
    return Execution(fwd.logits, float(fwd.loss.data), grads, dict(tape.recompute_counts),
                     len(tape.recompute_nodes))


def build_block(shape: BlockShape, dtype="float32", seed: int = 0) -> DenseBlock:
    """A standalone dense block with He-initialized weights, for timing a layout in isolation."""
    from densekit.builder.connectivity import connectivity_edges
    from densekit.builder.graph import build_basic_layer
    from densekit.train.init import he_std

    rng = np.random.default_rng(seed)
    conn = connectivity_edges("dense", shape.layers)
    layers = [build_basic_layer(shape.input_width(l), shape.growth, shape.bottleneck_mult, name=f"block.layer{l}",
                                dtype=dtype, index=l, sources=conn.sources(l)) for l in range(1, shape.layers + 1)]
    for layer in layers:
        for conv in layer.convs():
            w = conv.weight.data
            w[...] = rng.normal(0.0, he_std(w.shape), size=w.shape)
    return DenseBlock("block", 1, shape.k0, shape.growth, layers, conn)


def time_block(shape: BlockShape, strategy: str, batch: int, height: int, width: int, repeats: int = 3,
               dtype="float32", seed: int = 0) -> float:
    """Median wall time (ms) of one forward+backward pass through a block under ``strategy``."""
    import time

    if repeats < 1:
        raise UsageError(f"repeats: must be >= 1, got {repeats}")
    block = build_block(shape, dtype, seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, shape.k0, height, width)).astype(block.layers[0].convs()[0].weight.data.dtype)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        tape = Tape()
        out = run_block(block, Tensor(x, name="input"), Context(True, tape), strategy)
        tape.backward(ops.reduce_sum(out, tape=tape))
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))
