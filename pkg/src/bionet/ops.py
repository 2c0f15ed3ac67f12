"""Differentiable operations used by the network graph.

Every op is a pure numpy forward kernel plus a backward kernel, registered
under a name so recorded nodes can be recomputed and differentiated. The
public wrappers validate shapes, call the kernel and record onto the active
tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError
from .tensor import OpNode, Tensor, current_tape, register_kernel

__all__ = [
    "RunningStats",
    "add",
    "batchnorm2d",
    "concat_channels",
    "conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "mse",
    "relu",
    "slice_channels",
    "softmax_cross_entropy",
]

BN_EPS = 1e-3
BN_MOMENTUM = 0.99


def _apply(kind: str, inputs: tuple[Tensor, ...], forward, **attrs) -> tuple[Tensor, OpNode | None]:
    out_data, saved = forward(*(t.data for t in inputs), **attrs)
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires)
    tape = current_tape()
    node = None
    if tape is not None and requires:
        node = OpNode(kind, inputs, out, attrs, saved)
        tape.record(node)
    return out, node


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rank4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects a rank-4 (N, C, H, W) tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution


def _conv2d_fwd(x, w, b, *, stride, pad):
    kh, kw = w.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    out += b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), {"win": win, "padded_shape": xp.shape}


def _conv2d_bwd(node, g):
    x, w, _ = (t.data for t in node.inputs)
    stride, pad = node.attrs["stride"], node.attrs["pad"]
    win = node.saved["win"]
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    gb = g.sum(axis=(0, 2, 3))
    gcols = np.tensordot(g, w, axes=([1], [0]))  # n, ho, wo, c, kh, kw
    gxp = np.zeros(node.saved["padded_shape"], dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    h, wd = x.shape[2:]
    gx = gxp[:, :, pad:pad + h, pad:pad + wd]
    return gx, gw.astype(np.float32), gb.astype(np.float32)


register_kernel("conv2d", _conv2d_fwd, _conv2d_bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. ``w`` is ``(Cout, Cin, k, k)``, ``b`` is ``(Cout,)``."""
    _check_rank4(x, "conv2d")
    if w.data.ndim != 4 or b.shape != (w.shape[0],):
        raise ConfigError(f"conv2d weight/bias shapes {w.shape}/{b.shape} are inconsistent")
    if x.shape[1] != w.shape[1]:
        raise ConfigError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    h, wd = x.shape[2:]
    k = w.shape[2]
    if h + 2 * pad - k < 0 or wd + 2 * pad - w.shape[3] < 0 or min(h, wd) <= 0:
        raise ShapeError(f"conv2d output would have non-positive size for input {x.shape} and kernel {k}")
    return _apply("conv2d", (x, w, b), _conv2d_fwd, stride=stride, pad=pad)[0]


def _convt_fwd(x, w, b, *, stride):
    n, _, h, wd = x.shape
    co, kh, kw = w.shape[1:]
    y = np.tensordot(x, w, axes=([1], [0]))  # n, h, w, co, kh, kw
    out = np.zeros((n, co, (h - 1) * stride + kh, (wd - 1) * stride + kw), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += y[..., i, j].transpose(0, 3, 1, 2)
    out += b[None, :, None, None]
    return out, {}


def _convt_bwd(node, g):
    x, w, _ = (t.data for t in node.inputs)
    s = node.attrs["stride"]
    kh, kw = w.shape[2:]
    h, wd = x.shape[2:]
    gwin = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :h, :wd]
    gx = np.tensordot(gwin, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    gw = np.tensordot(x, gwin, axes=([0, 2, 3], [0, 2, 3]))
    gb = g.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx), gw.astype(np.float32), gb.astype(np.float32)


register_kernel("conv_transpose2d", _convt_fwd, _convt_bwd)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2) -> Tensor:
    """Transposed convolution (adjoint of a strided ``conv2d`` with ``pad=0``).

    ``w`` is ``(Cin, Cout, k, k)``; output size is ``(H - 1) * stride + k``,
    i.e. ``2H`` for the 2x2/stride-2 upsampling used by UP blocks.
    """
    _check_rank4(x, "conv_transpose2d")
    if w.data.ndim != 4 or b.shape != (w.shape[1],):
        raise ConfigError(f"conv_transpose2d weight/bias shapes {w.shape}/{b.shape} are inconsistent")
    if x.shape[1] != w.shape[0]:
        raise ConfigError(
            f"conv_transpose2d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[0]}"
        )
    if stride < 1:
        raise ConfigError(f"conv_transpose2d needs stride >= 1, got {stride}")
    return _apply("conv_transpose2d", (x, w, b), _convt_fwd, stride=stride)[0]


# --------------------------------------------------------------------------
# pooling


def _maxpool_fwd(x, *, k, stride):
    n, c = x.shape[:2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    # argmax returns the first maximum: row-major tie-break inside the window
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), {"indices": idx}


def _maxpool_bwd(node, g):
    x = node.inputs[0].data
    k, s = node.attrs["k"], node.attrs["stride"]
    idx = node.saved["indices"]
    ho, wo = idx.shape[2:]
    gx = np.zeros_like(x)
    for q in range(k * k):
        a, b = divmod(q, k)
        gx[:, :, a:a + s * ho:s, b:b + s * wo:s] += np.where(idx == q, g, 0.0)
    return (gx,)


register_kernel("maxpool2d", _maxpool_fwd, _maxpool_bwd)


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Max pooling; returns the pooled tensor and flat in-window argmax indices."""
    _check_rank4(x, "maxpool2d")
    stride = k if stride is None else stride
    h, w = x.shape[2:]
    if h < k or w < k or (h - k) % stride or (w - k) % stride:
        raise ShapeError(f"maxpool2d: spatial size {h}x{w} is not divisible by window {k}/stride {stride}")
    out, node = _apply("maxpool2d", (x,), _maxpool_fwd, k=k, stride=stride)
    if node is None:
        idx = _maxpool_fwd(x.data, k=k, stride=stride)[1]["indices"]
    else:
        idx = node.saved["indices"]
    return out, idx


# --------------------------------------------------------------------------
# normalization


@dataclass
class RunningStats:
    """Per-channel running mean/variance used in the eval phase."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32))


def _bn_fwd(x, gamma, beta, *, phase, eps, running_mean, running_var):
    if phase == "train":
        # double-precision statistics: a constant channel normalizes to exactly 0
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.var(axis=(0, 2, 3), dtype=np.float64)
    else:
        mean, var = running_mean, running_var
    mean = mean.astype(np.float32)
    var = var.astype(np.float32)
    inv_std = (1.0 / np.sqrt(var + np.float32(eps))).astype(np.float32)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out.astype(np.float32), {"xhat": xhat, "inv_std": inv_std, "mean": mean, "var": var}


def _bn_bwd(node, g):
    gamma = node.inputs[1].data
    xhat, inv_std = node.saved["xhat"], node.saved["inv_std"]
    ggamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    gbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    gxhat = g * gamma[None, :, None, None]
    if node.attrs["phase"] == "train":
        m = g.shape[0] * g.shape[2] * g.shape[3]
        s1 = gxhat.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)[None, :, None, None]
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)[None, :, None, None]
        gx = (inv_std[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
    else:
        gx = gxhat * inv_std[None, :, None, None]
    return gx.astype(np.float32), ggamma, gbeta


register_kernel("batchnorm2d", _bn_fwd, _bn_bwd)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    phase: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Batch normalization over ``(N, H, W)`` per channel.

    In the train phase the batch statistics are used and ``running`` is
    updated in place as ``momentum * running + (1 - momentum) * batch``
    (variance Bessel-corrected); the eval phase normalizes by ``running``.
    """
    _check_rank4(x, "batchnorm2d")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batchnorm2d: gamma/beta must have length {c}, got {gamma.shape}/{beta.shape}")
    if phase not in ("train", "eval"):
        raise ConfigError(f"phase must be 'train' or 'eval', got {phase!r}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise ShapeError("batchnorm2d on a zero-size batch")
    out, node = _apply(
        "batchnorm2d",
        (x, gamma, beta),
        _bn_fwd,
        phase=phase,
        eps=eps,
        running_mean=running.mean.copy(),
        running_var=running.var.copy(),
    )
    if phase == "train":
        saved = node.saved if node is not None else None
        if saved is None:
            mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
            var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        else:
            mean, var = saved["mean"].astype(np.float64), saved["var"].astype(np.float64)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running.mean = (momentum * running.mean + (1 - momentum) * mean).astype(np.float32)
        running.var = (momentum * running.var + (1 - momentum) * unbiased).astype(np.float32)
    return out


# --------------------------------------------------------------------------
# elementwise and structural


def _relu_fwd(x):
    return np.maximum(x, np.float32(0)), {}


def _relu_bwd(node, g):
    return (np.where(node.inputs[0].data > 0, g, np.float32(0)),)


register_kernel("relu", _relu_fwd, _relu_bwd)


def relu(x: Tensor) -> Tensor:
    return _apply("relu", (x,), _relu_fwd)[0]


def _add_fwd(a, b):
    return a + b, {}


def _add_bwd(node, g):
    return g, g


register_kernel("add", _add_fwd, _add_bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _apply("add", (a, b), _add_fwd)[0]


def _concat_fwd(*xs):
    return np.concatenate(xs, axis=1), {}


def _concat_bwd(node, g):
    bounds = np.cumsum([0] + [t.shape[1] for t in node.inputs])
    return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(node.inputs)))


register_kernel("concat_channels", _concat_fwd, _concat_bwd)


def concat_channels(*xs: Tensor) -> Tensor:
    """Stack tensors along the channel axis, first argument's channels first."""
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for x in xs:
        _check_rank4(x, "concat_channels")
    ref = xs[0].shape
    for x in xs[1:]:
        if (x.shape[0],) + x.shape[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"concat_channels: N/H/W mismatch between {ref} and {x.shape}")
    return _apply("concat_channels", tuple(xs), _concat_fwd)[0]


def _slice_fwd(x, *, start, stop):
    return np.ascontiguousarray(x[:, start:stop]), {}


def _slice_bwd(node, g):
    x = node.inputs[0].data
    gx = np.zeros_like(x)
    gx[:, node.attrs["start"]:node.attrs["stop"]] = g
    return (gx,)


register_kernel("slice_channels", _slice_fwd, _slice_bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_rank4(x, "slice_channels")
    if not 0 <= start <= stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {x.shape[1]} channels")
    return _apply("slice_channels", (x,), _slice_fwd, start=start, stop=stop)[0]


# --------------------------------------------------------------------------
# losses (scalar results kept in float64)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sce_fwd(logits, *, target):
    z = logits.astype(np.float64)
    count = target.size
    if z.shape[1] == 1:
        # single-channel head: binary logit, equivalent to softmax over [0, z]
        z0 = z[:, 0]
        loss = -(target * _log_sigmoid(z0) + (1 - target) * _log_sigmoid(-z0)).sum() / count
        return np.asarray(loss), {}
    zmax = z.max(axis=1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, target[:, None], axis=1)
    return np.asarray(-picked.sum() / count), {"logp": logp}


def _sce_bwd(node, g):
    target = node.attrs["target"]
    z = node.inputs[0].data.astype(np.float64)
    count = target.size
    if z.shape[1] == 1:
        p = 1.0 / (1.0 + np.exp(-z[:, 0]))
        gz = ((p - target) / count)[:, None]
    else:
        p = np.exp(node.saved["logp"])
        np.put_along_axis(p, target[:, None], np.take_along_axis(p, target[:, None], axis=1) - 1.0, axis=1)
        gz = p / count
    return ((gz * g).astype(np.float32),)


register_kernel("softmax_cross_entropy", _sce_fwd, _sce_bwd)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean pixel-wise cross entropy against an integer class map ``(N, H, W)``.

    A single-channel ``logits`` tensor is treated as the foreground logit of a
    binary problem (sigmoid cross entropy).
    """
    _check_rank4(logits, "softmax_cross_entropy")
    target = np.asarray(target)
    n, c, h, w = logits.shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    classes = max(c, 2)
    if target.size and (target.min() < 0 or target.max() >= classes):
        raise DataError(f"class index out of range [0, {classes}) in target")
    return _apply("softmax_cross_entropy", (logits,), _sce_fwd, target=target.astype(np.int64))[0]


def _mse_fwd(pred, target):
    d = pred.astype(np.float64) - target
    return np.asarray((d * d).sum() / d.size), {}


def _mse_bwd(node, g):
    pred, target = (t.data for t in node.inputs)
    gp = (2.0 * (pred.astype(np.float64) - target) / pred.size * g).astype(np.float32)
    return gp, -gp


register_kernel("mse", _mse_fwd, _mse_bwd)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    return _apply("mse", (pred, target), _mse_fwd)[0]
