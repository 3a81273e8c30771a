"""Dense reference attention: scaled dot-product, MHSA and local windows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (
    Tensor,
    concat_lastaxis,
    matmul,
    permute,
    reshape,
    scale,
    softmax_lastaxis,
    transpose_last,
)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    c = q.shape[-1]
    if k.shape[-1] != c:
        raise DimensionError(f"attention: query channels {q.shape} vs key channels {k.shape}")
    logits = scale(matmul(q, transpose_last(k)), 1.0 / math.sqrt(c))
    return softmax_lastaxis(logits)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(c)) v`` over the last two axes.

    ``c`` is the channel extent of the tensors as passed, so per-head calls
    are scaled by the head width.
    """
    if v.shape[-1] != q.shape[-1] or v.shape[:-1] != k.shape[:-1]:
        raise DimensionError(f"attention: shapes q={q.shape} k={k.shape} v={v.shape}")
    return matmul(attention_weights(q, k), v)


@dataclass
class MhsaParams:
    """Per-head projections ``wq[i], wk[i], wv[i]`` (C x C/h) and ``wo`` (C x C)."""

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    @property
    def heads(self) -> int:
        return len(self.wq)

    @classmethod
    def from_joint(cls, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int) -> "MhsaParams":
        """Split C x C projection matrices column-wise into ``heads`` chunks."""
        c = wq.shape[-1]
        if heads < 1 or c % heads:
            raise ConfigurationError(f"channels {c} not divisible by heads {heads}")
        d = c // heads

        def split(w: Tensor) -> list[Tensor]:
            return [Tensor(w.data[:, i * d:(i + 1) * d]) for i in range(heads)]

        return cls(split(wq), split(wk), split(wv), wo)


def mhsa(x: Tensor, params: MhsaParams) -> Tensor:
    """Multi-head self-attention of ``x[..., n, C]``."""
    h = params.heads
    c = x.shape[-1]
    if h < 1 or c % h:
        raise ConfigurationError(f"channels {c} not divisible by heads {h}")
    if params.wo.shape != (c, c):
        raise DimensionError(f"mhsa: output weight {params.wo.shape} vs channels {c}")
    heads = [
        attention(matmul(x, params.wq[i]), matmul(x, params.wk[i]), matmul(x, params.wv[i]))
        for i in range(h)
    ]
    return matmul(concat_lastaxis(heads), params.wo)


def window_partition(x: Tensor, window: int) -> Tensor:
    """``[H, W, C] -> [(H/w)(W/w), w*w, C]``, windows in row-major order."""
    hh, ww, c = x.shape
    if window < 1 or hh % window or ww % window:
        raise ConfigurationError(f"map {hh}x{ww} not divisible by window {window}")
    nh, nw = hh // window, ww // window
    t = reshape(x, (nh, window, nw, window, c))
    t = permute(t, (0, 2, 1, 3, 4))
    return reshape(t, (nh * nw, window * window, c))


def window_merge(xw: Tensor, window: int, hh: int, ww: int) -> Tensor:
    nh, nw = hh // window, ww // window
    c = xw.shape[-1]
    if xw.shape != (nh * nw, window * window, c):
        raise DimensionError(f"window_merge: {xw.shape} inconsistent with {hh}x{ww}, window {window}")
    t = reshape(xw, (nh, nw, window, window, c))
    t = permute(t, (0, 2, 1, 3, 4))
    return reshape(t, (hh, ww, c))


def window_attention(x: Tensor, window: int, params: MhsaParams) -> Tensor:
    """MHSA restricted to non-overlapping ``window x window`` blocks (no shift)."""
    hh, ww, _ = x.shape
    xw = window_partition(x, window)
    return window_merge(mhsa(xw, params), window, hh, ww)


def random_mhsa_params(channels: int, heads: int, rng: np.random.Generator,
                       std: float = 0.3, dtype=np.float32) -> MhsaParams:
    def w():
        return Tensor(rng.normal(0.0, std, (channels, channels)), dtype=dtype)

    return MhsaParams.from_joint(w(), w(), w(), w(), heads)
