"""NetworkSpec -> executable layer graph."""

from densekit.builder.connectivity import ConnectivityGraph, connectivity_edges, full_dense_edges
from densekit.builder.graph import (
    BN,
    AvgPool,
    BasicLayer,
    Conv,
    DenseBlock,
    Dropout,
    Head,
    LayerGraph,
    MaxPool,
    ReLU,
    ResidualLayer,
    Stage,
    Transition,
    build,
    build_basic_layer,
    build_cifar,
    build_fdc,
    build_imagenet,
    build_pool_transition,
    build_residual_layer,
    build_transition,
    input_channels,
    total_edges,
)
from densekit.builder.spec import (
    IMAGENET_PRESETS,
    NAMED_PRESETS,
    SPEC_VERSION,
    SWEEP_DEPTHS,
    NetworkSpec,
    cifar_spec,
    imagenet_spec,
    preset,
    transition_width,
)

__all__ = [
    "BN", "AvgPool", "BasicLayer", "Conv", "ConnectivityGraph", "DenseBlock", "Dropout", "Head",
    "IMAGENET_PRESETS", "LayerGraph", "MaxPool", "NAMED_PRESETS", "NetworkSpec", "ReLU", "ResidualLayer",
    "SPEC_VERSION", "SWEEP_DEPTHS", "Stage", "Transition", "build", "build_basic_layer", "build_cifar",
    "build_fdc", "build_imagenet", "build_pool_transition", "build_residual_layer", "build_transition",
    "cifar_spec", "connectivity_edges", "full_dense_edges", "imagenet_spec", "input_channels", "preset",
    "total_edges", "transition_width",
]
