"""Feature-reuse heatmaps: how strongly each layer's first convolution weighs each earlier source."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List

import numpy as np

from densekit.builder.graph import DenseBlock, LayerGraph, Transition
from densekit.errors import UnsupportedError


@dataclass
class BlockHeatmap:
    """``matrix[t - 1, s]`` is the entry for target t (1..M, then M+1 for the
    transition or classifier reading the block output) and source s (0..M).
    Entries without a connection are NaN."""

    block: int
    matrix: np.ndarray
    consumer: str  # "transition", "classifier" or "" when the block output feeds a parameter-free pool

    def entries(self):
        rows, cols = self.matrix.shape
        for t in range(1, rows + 1):
            for s in range(cols):
                v = self.matrix[t - 1, s]
                if not np.isnan(v):
                    yield t, s, float(v)


@dataclass
class HeatmapReport:
    blocks: List[BlockHeatmap] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("block", "target_layer", "source_layer", "value"))
        for b in self.blocks:
            for t, s, v in b.entries():
                w.writerow((b.block, t, s, repr(v)))
        return buf.getvalue()


def _slice_means(weight: np.ndarray, widths) -> list:
    """Mean |w| over each source's input-channel slice (normalizes by its channel count)."""
    out, off = [], 0
    for c in widths:
        out.append(float(np.mean(np.abs(weight[:, off:off + c]))))
        off += c
    return out


def feature_reuse_heatmap(graph: LayerGraph) -> HeatmapReport:
    if graph.spec.connectivity != "dense":
        raise UnsupportedError(f"heatmap needs dense connectivity, got {graph.spec.connectivity!r}")
    report = HeatmapReport()
    stages = graph.stages
    for i, stage in enumerate(stages):
        if not isinstance(stage, DenseBlock):
            continue
        M = len(stage.layers)
        mat = np.full((M + 1, M + 1), np.nan)
        for layer in stage.layers:
            widths = [stage.source_width(s) for s in layer.sources]
            for s, v in zip(layer.sources, _slice_means(layer.first_conv.weight.data, widths)):
                mat[layer.index - 1, s] = v
        widths = [stage.source_width(s) for s in range(M + 1)]
        nxt = stages[i + 1] if i + 1 < len(stages) else None
        consumer = ""
        if isinstance(nxt, Transition) and nxt.convs():
            consumer, w = "transition", nxt.convs()[0].weight.data
        elif nxt is None:
            consumer, w = "classifier", graph.head.weight.data
        if consumer:
            mat[M, :] = _slice_means(w, widths)
        else:
            mat = mat[:M]
        report.blocks.append(BlockHeatmap(stage.index, mat, consumer))
    return report
