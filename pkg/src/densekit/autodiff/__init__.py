"""Dense tensors with explicit-tape reverse-mode differentiation."""

from densekit.autodiff.ops import (
    add,
    avg_pool2,
    batch_norm,
    buffer_write,
    channel_offsets,
    channel_view,
    concat_channels,
    conv2d,
    conv_output_size,
    dropout,
    global_avg_pool,
    linear,
    linear_softmax_xent,
    max_pool,
    reduce_sum,
    relu,
)
from densekit.autodiff.tape import Node, Tape
from densekit.autodiff.tensor import BnState, Tensor, Workspace, parameter, resolve_dtype

backward = Tape.backward

__all__ = [
    "BnState", "Node", "Tape", "Tensor", "Workspace", "add", "avg_pool2", "backward", "batch_norm",
    "buffer_write", "channel_offsets", "channel_view", "concat_channels", "conv2d", "conv_output_size",
    "dropout", "global_avg_pool", "linear", "linear_softmax_xent", "max_pool", "parameter", "reduce_sum", "relu",
    "resolve_dtype",
]
