"""He-normal weight initialization."""

from __future__ import annotations

import numpy as np

from densekit.builder.graph import LayerGraph


def he_std(weight_shape) -> float:
    """Fan-out He scale for a (Cout, Cin, kh, kw) kernel: sqrt(2 / (Cout*kh*kw))."""
    cout, _, kh, kw = weight_shape
    return float(np.sqrt(2.0 / (cout * kh * kw)))


def init_weights(graph: LayerGraph, seed: int) -> None:
    """Fill every parameter in graph order from one seeded generator.

    Conv kernels ~ N(0, 2 / (Cout*kh*kw)); BN gamma = 1, beta = 0 and running
    statistics reset; classifier weight ~ N(0, 1 / in_features), bias 0.
    """
    rng = np.random.default_rng(seed)
    for name, p in graph.named_parameters():
        if name.endswith(".gamma"):
            p.data[...] = 1
        elif name.endswith(".beta") or name == "classifier.bias":
            p.data[...] = 0
        elif name == "classifier.weight":
            p.data[...] = rng.normal(0.0, 1.0 / np.sqrt(p.data.shape[1]), size=p.data.shape)
        else:
            p.data[...] = rng.normal(0.0, he_std(p.data.shape), size=p.data.shape)
        p.grad = None
    for state in graph.bn_states():
        state.running_mean[...] = 0
        state.running_var[...] = 1
