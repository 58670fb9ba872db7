"""Differentiable primitives over (N, C, H, W) arrays.

Each op takes ``Tensor`` inputs and an optional ``tape``; when a tape is
given the op records a node whose backward closure reads input data
through the tensors (never through captured arrays), so an output that was
discarded and recomputed is indistinguishable from one that was stored.

Reductions always run on a canonical C-ordered copy, which keeps results
bit-identical whether an input is a fresh array or a strided view into a
shared buffer.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from densekit.autodiff.tape import Node, Tape
from densekit.autodiff.tensor import BnState, Tensor, Workspace
from densekit.errors import ConfigError, DataError, DegenerateBatchError

KERNEL_SIZES = (1, 3, 7)


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _result(data, *inputs: Tensor, name=None) -> Tensor:
    return Tensor(data, name=name, requires_grad=_needs_grad(*inputs))


def _check_4d(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ConfigError(f"{op} expects a 4-D (N, C, H, W) tensor, got shape {tuple(x.data.shape)}")


def _channel_rows(a: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W), always a fresh C-ordered array."""
    n, c, h, w = a.shape
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def _from_channel_rows(rows: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    return rows.reshape(c, n, h, w).transpose(1, 0, 2, 3)


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = np.ascontiguousarray(x)
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (n, ho, wo, c, kh, kw), (s0, s2 * stride, s3 * stride, s1, s2, s3), writeable=False)
    return win.reshape(n * ho * wo, c * kh * kw), ho, wo


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int):
    n, c, h, w = shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d = dcols.reshape(n, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0, tape: Optional[Tape] = None) -> Tensor:
    """Bias-free 2-D cross-correlation."""
    _check_4d(x, "conv2d")
    w = weight.data
    if w.ndim != 4 or x.data.shape[1] != w.shape[1]:
        raise ConfigError(
            f"conv2d shape mismatch: input {tuple(x.data.shape)} vs kernel {tuple(w.shape)}"
        )
    cout, cin, kh, kw = w.shape
    if kh not in KERNEL_SIZES or kw not in KERNEL_SIZES:
        raise ConfigError(f"conv2d kernel {kh}x{kw} unsupported; sizes must be in {KERNEL_SIZES}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    n, _, h, wd = x.data.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output would be empty for input {tuple(x.data.shape)} and kernel {tuple(w.shape)}")

    cols, ho, wo = _im2col(x.read(), kh, kw, stride, pad)
    wmat = w.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    y = _result(np.ascontiguousarray(out), x, weight)

    if tape is not None:
        xshape = x.data.shape

        def backward(g):
            gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
            cols, _, _ = _im2col(x.read(), kh, kw, stride, pad)
            dw = (gm.T @ cols).reshape(weight.data.shape) if weight.requires_grad else None
            dx = None
            if x.requires_grad:
                dx = _col2im(gm @ weight.data.reshape(cout, -1), xshape, kh, kw, stride, pad, ho, wo)
            return dx, dw

        tape.record(Node("conv2d", (x, weight), y, backward, needs=(x,)))
    return y


# ---------------------------------------------------------------- batch norm


def _bn_apply(x: np.ndarray, mean, invstd, gamma, beta, out=None) -> np.ndarray:
    shape = (1, -1, 1, 1)
    out = np.subtract(x, mean.reshape(shape), out=out)
    out *= invstd.reshape(shape)
    out *= gamma.reshape(shape)
    out += beta.reshape(shape)
    return out


def batch_norm(
    x: Tensor,
    state: BnState,
    training: bool,
    tape: Optional[Tape] = None,
    workspace: Optional[Workspace] = None,
) -> Tensor:
    """Per-channel normalization followed by ``gamma * xhat + beta``.

    Training mode normalizes with biased batch statistics and folds them
    into the running estimates (unbiased variance, exponential average).
    With a ``workspace`` the output is written into shared scratch memory
    and the node is marked for recompute on backward.
    """
    _check_4d(x, "batch_norm")
    n, c, h, w = x.data.shape
    if c != state.channels:
        raise ConfigError(f"batch_norm got {c} channels but state has {state.channels}")
    xd = x.read()
    if training:
        count = n * h * w
        if count < 2:
            raise DegenerateBatchError(
                f"batch_norm in training mode needs >= 2 values per channel, got {count} for shape {tuple(xd.shape)}"
            )
        rows = _channel_rows(xd)
        mean = rows.mean(axis=1)
        var = ((rows - mean[:, None]) ** 2).mean(axis=1)
        m = state.momentum
        state.running_mean *= 1 - m
        state.running_mean += m * mean
        state.running_var *= 1 - m
        state.running_var += m * var * (count / (count - 1))
    else:
        mean = state.running_mean.copy()
        var = state.running_var.copy()
    invstd = 1.0 / np.sqrt(var + state.eps)
    gamma, beta = state.gamma, state.beta

    y = _result(None, x, gamma, beta)
    if workspace is not None:
        _bn_apply(xd, mean, invstd, gamma.data, beta.data, out=workspace.claim(y, xd.shape))
    else:
        y.data = _bn_apply(xd, mean, invstd, gamma.data, beta.data)

    if tape is not None:
        count = n * h * w

        def backward(g):
            xhat = _channel_rows(_bn_apply(x.read(), mean, invstd, np.ones_like(invstd), np.zeros_like(invstd)))
            gr = _channel_rows(g)
            dbeta = gr.sum(axis=1)
            dgamma = (gr * xhat).sum(axis=1)
            if not x.requires_grad:
                return None, dgamma, dbeta
            scale = gamma.data * invstd
            if training:
                dx = (scale / count)[:, None] * (count * gr - dbeta[:, None] - xhat * dgamma[:, None])
            else:
                dx = scale[:, None] * gr
            return _from_channel_rows(dx, g.shape), dgamma, dbeta

        refill = None
        if workspace is not None:
            def refill():
                _bn_apply(x.read(), mean, invstd, gamma.data, beta.data, out=workspace.claim(y, x.data.shape))

        tape.record(Node("batch_norm", (x, gamma, beta), y, backward, needs=(x,), refill=refill))
    return y


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """max(0, x). Runs in place when the input lives in a shared workspace."""
    xd = x.read()
    y = _result(None, x)
    ws = x.workspace
    if ws is not None:
        np.maximum(xd, 0, out=ws.claim(y, xd.shape))
    else:
        y.data = np.maximum(xd, 0)

    if tape is not None:
        def backward(g):
            return (g * (y.read() > 0),)

        refill = None
        if ws is not None:
            def refill():
                xd = x.read()
                np.maximum(xd, 0, out=ws.claim(y, xd.shape))

        tape.record(Node("relu", (x,), y, backward, needs=(y,), refill=refill))
    return y


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ConfigError(f"add shape mismatch: {tuple(a.data.shape)} vs {tuple(b.data.shape)}")
    y = _result(a.read() + b.read(), a, b)
    if tape is not None:
        tape.record(Node("add", (a, b), y, lambda g: (g, g)))
    return y


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool,
            tape: Optional[Tape] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs a seeded generator")
    xd = x.read()
    keep = (rng.random(xd.shape) >= rate).astype(xd.dtype) * xd.dtype.type(1.0 / (1.0 - rate))
    y = _result(xd * keep, x)
    if tape is not None:
        tape.record(Node("dropout", (x,), y, lambda g: (g * keep,)))
    return y


# ---------------------------------------------------------------- concatenation


def _split(g: np.ndarray, widths: Sequence[int]):
    out, off = [], 0
    for c in widths:
        out.append(g[:, off:off + c])
        off += c
    return out


def concat_channels(inputs: Sequence[Tensor], tape: Optional[Tape] = None) -> Tensor:
    """Copying concatenation along channels, in list order."""
    if not inputs:
        raise ConfigError("concat_channels needs at least one input")
    for t in inputs:
        _check_4d(t, "concat_channels")
    n, _, h, w = inputs[0].data.shape
    for i, t in enumerate(inputs):
        if (t.data.shape[0], t.data.shape[2], t.data.shape[3]) != (n, h, w):
            raise ConfigError(
                f"concat_channels input {i} has shape {tuple(t.data.shape)}, "
                f"expected N,H,W = {(n, h, w)} from input 0"
            )
    widths = [t.data.shape[1] for t in inputs]
    y = _result(np.concatenate([t.read() for t in inputs], axis=1), *inputs)
    if tape is not None:
        tape.record(Node("concat", tuple(inputs), y, lambda g: _split(g, widths)))
    return y


def channel_offsets(inputs: Sequence[Tensor]) -> list:
    offs, off = [], 0
    for t in inputs:
        offs.append(off)
        off += t.data.shape[1]
    return offs


def buffer_write(x: Tensor, buffer: np.ndarray, offset: int, tape: Optional[Tape] = None) -> Tensor:
    """Store ``x`` into channels [offset, offset + C) of a block buffer.

    The returned tensor aliases that region; gradients pass through unchanged.
    """
    xd = x.read()
    c = xd.shape[1]
    if offset + c > buffer.shape[1] or buffer.shape[0] != xd.shape[0] or buffer.shape[2:] != xd.shape[2:]:
        raise ConfigError(f"buffer of shape {buffer.shape} cannot take {tuple(xd.shape)} at channel {offset}")
    region = buffer[:, offset:offset + c]
    region[...] = xd
    y = _result(region, x)
    if tape is not None:
        tape.record(Node("buffer_write", (x,), y, lambda g: (g,)))
    return y


def channel_view(buffer: np.ndarray, sources: Sequence[Tensor], tape: Optional[Tape] = None) -> Tensor:
    """Concatenation by aliasing: the sources already sit back to back in ``buffer``."""
    widths = [t.data.shape[1] for t in sources]
    width = sum(widths)
    for t, off in zip(sources, channel_offsets(sources)):
        region = buffer[:, off:off + t.data.shape[1]]
        if not np.shares_memory(t.data, region) or t.data.shape != region.shape:
            raise ConfigError(f"{t.label} is not stored at channel {off} of the block buffer")
    y = _result(buffer[:, :width], *sources)
    if tape is not None:
        tape.record(Node("concat_view", tuple(sources), y, lambda g: _split(g, widths)))
    return y


# ---------------------------------------------------------------- pooling


def avg_pool2(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """2x2 average pooling, stride 2 (floor for odd extents)."""
    _check_4d(x, "avg_pool2")
    n, c, h, w = x.data.shape
    if h < 2 or w < 2:
        raise ConfigError(f"avg_pool2 needs H, W >= 2, got {tuple(x.data.shape)}")
    ho, wo = h // 2, w // 2
    xd = x.read()
    a = xd[:, :, 0:2 * ho:2, 0:2 * wo:2]
    b = xd[:, :, 0:2 * ho:2, 1:2 * wo:2]
    cc = xd[:, :, 1:2 * ho:2, 0:2 * wo:2]
    d = xd[:, :, 1:2 * ho:2, 1:2 * wo:2]
    y = _result((((a + b) + cc) + d) * xd.dtype.type(0.25), x)
    if tape is not None:
        def backward(g):
            dx = np.zeros((n, c, h, w), dtype=g.dtype)
            q = g * g.dtype.type(0.25)
            for i in (0, 1):
                for j in (0, 1):
                    dx[:, :, i:2 * ho:2, j:2 * wo:2] = q
            return (dx,)

        tape.record(Node("avg_pool2", (x,), y, backward))
    return y


def max_pool(x: Tensor, k: int, stride: int, pad: int = 0, tape: Optional[Tape] = None) -> Tensor:
    """k x k max pooling; padding is -inf so it never wins."""
    _check_4d(x, "max_pool")
    n, c, h, w = x.data.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ConfigError(f"max_pool window {k} larger than input {tuple(x.data.shape)} with pad {pad}")
    xd = x.read()
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf) if pad else np.ascontiguousarray(xd)
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (n, c, ho, wo, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    y = _result(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], x)
    if tape is not None:
        def backward(g):
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for idx in range(k * k):
                i, j = divmod(idx, k)
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == idx, g, 0)
            return (dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp,)

        tape.record(Node("max_pool", (x,), y, backward))
    return y


def global_avg_pool(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _check_4d(x, "global_avg_pool")
    n, c, h, w = x.data.shape
    y = _result(x.read().mean(axis=(2, 3), keepdims=True), x)
    if tape is not None:
        def backward(g):
            return (np.broadcast_to(g / (h * w), (n, c, h, w)),)

        tape.record(Node("global_avg_pool", (x,), y, backward))
    return y


# ---------------------------------------------------------------- classifier


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> np.ndarray:
    """Logits (N, classes) for an (N, C, 1, 1) input; no tape."""
    n = x.data.shape[0]
    return x.read().reshape(n, -1) @ weight.data.T + bias.data


def linear_softmax_xent(x: Tensor, weight: Tensor, bias: Tensor, labels, tape: Optional[Tape] = None,
                        return_logits: bool = False):
    """Mean cross-entropy of a fully-connected softmax classifier."""
    _check_4d(x, "linear_softmax_xent")
    n = x.data.shape[0]
    classes, cin = weight.data.shape
    if x.data.shape[1:] != (cin, 1, 1):
        raise ConfigError(f"classifier expects input (N, {cin}, 1, 1), got {tuple(x.data.shape)}")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"label {int(labels[i])} at sample {i} outside [0, {classes})")
    labels = labels.astype(np.intp)

    xm = x.read().reshape(n, cin)
    logits = xm @ weight.data.T + bias.data
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1)
    loss_rows = np.log(se) - z[np.arange(n), labels]
    y = _result(np.asarray(loss_rows.mean()), x, weight, bias)

    if tape is not None:
        probs = ez / se[:, None]

        def backward(g):
            d = probs.copy()
            d[np.arange(n), labels] -= 1
            d *= g / n
            dx = (d @ weight.data).reshape(n, cin, 1, 1) if x.requires_grad else None
            return dx, d.T @ x.read().reshape(n, cin), d.sum(axis=0)

        tape.record(Node("linear_softmax_xent", (x, weight, bias), y, backward, needs=(x,)))
    if return_logits:
        return y, logits
    return y


def reduce_sum(x: Tensor, weights: Optional[np.ndarray] = None, tape: Optional[Tape] = None) -> Tensor:
    """Scalar sum(x) or sum(weights * x); the probe used by gradient checks."""
    xd = x.read()
    if weights is not None and weights.shape != xd.shape:
        raise ConfigError(f"reduce_sum weights {weights.shape} do not match input {tuple(xd.shape)}")
    y = _result(np.asarray((xd if weights is None else xd * weights).sum()), x)
    if tape is not None:
        def backward(g):
            return (np.broadcast_to(g, xd.shape) if weights is None else g * weights,)

        tape.record(Node("reduce_sum", (x,), y, backward))
    return y
