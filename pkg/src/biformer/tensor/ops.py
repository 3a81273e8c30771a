"""Primitive tensor operations with their backward rules.

Every op allocates a fresh output. When the innermost active tape tracks any
input, the op appends a node whose vjp maps the output cotangent to one
cotangent per input.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import ArgumentError, DimensionError, IndexOutOfRange
from .core import IndexTensor, Tensor, current_tape, report_macs

LAYER_NORM_EPS = 1e-5


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    result = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(op, inputs, result, vjp)
    return result


def _result_dtype(*ts: Tensor) -> np.dtype:
    return np.result_type(*(t.dtype for t in ts))


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    n = b.ndim
    if n > a.ndim or a.shape[a.ndim - n:] != b.shape:
        raise DimensionError(f"{op}: shape {b.shape} does not match trailing axes of {a.shape}")


def _zero_pad(a: np.ndarray, pads) -> np.ndarray:
    """``np.pad`` with zeros, minus its per-call overhead."""
    shape = tuple(n + lo + hi for n, (lo, hi) in zip(a.shape, pads))
    out = np.zeros(shape, dtype=a.dtype)
    out[tuple(slice(lo, lo + n) for n, (lo, _) in zip(a.shape, pads))] = a
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    return g


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """``a + b``; ``b`` may match a trailing suffix of ``a`` (e.g. a bias)."""
    _check_suffix(a, b, "add")
    out = (a.data + b.data).astype(_result_dtype(a, b), copy=False)
    return _emit("add", (a, b), out, lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    out = (a.data - b.data).astype(_result_dtype(a, b), copy=False)
    return _emit("sub", (a, b), out, lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may match a trailing suffix of ``a``."""
    _check_suffix(a, b, "mul")
    out = (a.data * b.data).astype(_result_dtype(a, b), copy=False)

    def vjp(g):
        return g * b.data, _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), out, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.dtype.type(c)
    return _emit("scale", (a,), out, lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / math.sqrt(2.0)))
    out = (d * cdf).astype(x.dtype, copy=False)

    def vjp(g):
        pdf = np.exp(-0.5 * d * d) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + d * pdf)).astype(x.dtype, copy=False),

    return _emit("gelu", (x,), out, vjp)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(e) for e in shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    out = x.data.reshape(shape).copy()
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("permute", (x,), out, lambda g: (g.transpose(inverse),))


def transpose_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat_lastaxis(xs: Sequence[Tensor]) -> Tensor:
    lead = xs[0].shape[:-1]
    for t in xs:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat: leading shapes differ, {xs[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in xs])

    def vjp(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _emit("concat", tuple(xs), out, vjp)


def stack(xs: Sequence[Tensor]) -> Tensor:
    out = np.stack([t.data for t in xs])
    return _emit("stack", tuple(xs), out, lambda g: tuple(g[i] for i in range(len(xs))))


def select0(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""
    if not 0 <= i < x.shape[0]:
        raise IndexOutOfRange(f"select0: index {i} >= extent {x.shape[0]}")
    out = x.data[i].copy()

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[i] = g
        return gx,

    return _emit("select0", (x,), out, vjp)


# ---------------------------------------------------------------------------
# Contractions and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a[..., m, p] @ b[..., p, n]``.

    Leading extents must match exactly, except that a 2-D ``b`` (a weight
    matrix) is shared across every leading index of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    report_macs(out.size * a.shape[-1])

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = np.matmul(a.data.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax_lastaxis(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True)),

    return _emit("softmax", (x,), y, vjp)


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def mean_axis(x: Tensor, axis: int) -> Tensor:
    ax = _axis(x, axis)
    n = x.shape[ax]
    out = x.data.mean(axis=ax)
    if out.ndim == 0:
        out = np.asarray(out, dtype=x.dtype)

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, ax) / n, x.shape),

    return _emit("mean", (x,), out, vjp)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape),))


# ---------------------------------------------------------------------------
# Index computations
# ---------------------------------------------------------------------------


def topk_indices(x: Tensor, k: int) -> IndexTensor:
    """Row-wise indices of the ``k`` largest entries, largest first.

    Ties go to the lower index. Never recorded on a tape.
    """
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ArgumentError(f"topk: k={k} outside [1, {n}]")
    order = np.argsort(-x.data, axis=-1, kind="stable")
    return IndexTensor(order[..., :k])


def gather_axis0(x: Tensor, idx: IndexTensor) -> Tensor:
    """``out[i, j] = x[idx[i, j]]``; backward scatter-adds into ``x``."""
    r = x.shape[0]
    if idx.data.size and idx.data.max() >= r:
        raise IndexOutOfRange(f"gather: index {int(idx.data.max())} >= extent {r}")
    ids = idx.data
    out = x.data[ids]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, ids.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return gx,

    return _emit("gather", (x,), out, vjp)


# ---------------------------------------------------------------------------
# Convolutions (channels-last)
# ---------------------------------------------------------------------------


def depthwise_conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel ``s x s`` cross-correlation, stride 1, zero "same" padding.

    ``x`` is ``[..., h, w, c]`` and ``kernel`` is ``[s, s, c]``.
    """
    s = kernel.shape[0]
    if kernel.ndim != 3 or kernel.shape[1] != s or s % 2 == 0:
        raise ArgumentError(f"depthwise kernel must be [s, s, c] with odd s, got {kernel.shape}")
    if x.ndim < 3 or x.shape[-1] != kernel.shape[-1]:
        raise DimensionError(f"depthwise: input {x.shape} vs kernel {kernel.shape}")
    p = s // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(p, p), (p, p), (0, 0)]
    spatial = (x.ndim - 3, x.ndim - 2)
    windows = sliding_window_view(_zero_pad(x.data, pad), (s, s), axis=spatial)
    out = np.einsum("...hwcij,ijc->...hwc", windows, kernel.data)
    report_macs(x.size * s * s)

    def vjp(g):
        gk = np.einsum("nhwcij,nhwc->ijc", windows.reshape((-1,) + windows.shape[-5:]),
                       g.reshape((-1,) + g.shape[-3:]))
        gwin = sliding_window_view(_zero_pad(g, pad), (s, s), axis=spatial)
        gx = np.einsum("...hwcij,ijc->...hwc", gwin, kernel.data[::-1, ::-1])
        return gx, gk

    return _emit("depthwise_conv2d", (x, kernel), out, vjp)


def conv_output_extent(n: int, s: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - s) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Dense cross-correlation of ``x[h, w, cin]`` with ``kernel[s, s, cin, cout]``."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2] != x.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ArgumentError(f"conv2d: stride={stride}, pad={pad}")
    sh, sw, cin, cout = kernel.shape
    h, w, _ = x.shape
    oh = conv_output_extent(h, sh, stride, pad)
    ow = conv_output_extent(w, sw, stride, pad)
    if oh < 1 or ow < 1:
        raise ArgumentError(f"conv2d: degenerate output {oh}x{ow} for input {x.shape}, kernel {sh}")
    xp = _zero_pad(x.data, [(pad, pad), (pad, pad), (0, 0)])
    # im2col: [oh*ow, sh*sw*cin] with (i, j, cin) fastest-last, matching the kernel layout
    windows = sliding_window_view(xp, (sh, sw), axis=(0, 1))[::stride, ::stride][:oh, :ow]
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(oh * ow, sh * sw * cin)
    kmat = kernel.data.reshape(sh * sw * cin, cout)
    out = (cols @ kmat).reshape(oh, ow, cout)
    report_macs(oh * ow * sh * sw * cin * cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gcols = (g2 @ kmat.T).reshape(oh, ow, sh, sw, cin)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        span_h = stride * (oh - 1) + 1
        span_w = stride * (ow - 1) + 1
        for i in range(sh):
            for j in range(sw):
                gxp[i:i + span_h:stride, j:j + span_w:stride, :] += gcols[:, :, i, j, :]
        return gxp[pad:pad + h, pad:pad + w, :], gk

    return _emit("conv2d", (x, kernel), out, vjp)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if eps <= 0:
        raise ArgumentError(f"layer_norm: eps must be positive, got {eps}")
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gain.data + bias.data).astype(_result_dtype(x, gain, bias), copy=False)

    def vjp(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit("layer_norm", (x, gain, bias), out, vjp)
