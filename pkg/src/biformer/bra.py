"""Bi-level routing attention.

A feature map is cut into ``partition x partition`` regions. Region-level
queries and keys (token means) form a region affinity graph which is pruned
to the ``topk`` strongest edges per region. Each query token then attends to
every token of its region's routed regions, gathered into a dense block so
the fine-grained step is a plain batched matmul. A depthwise convolution on
the values (local context enhancement) is added before the output projection.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import attention_weights
from .errors import ArgumentError, ConfigurationError, DimensionError
from .tensor import (
    IndexTensor,
    Tensor,
    add,
    current_tape,
    depthwise_conv2d,
    gather_axis0,
    mac_scope,
    matmul,
    mean_axis,
    no_tape,
    permute,
    reshape,
    stack,
    topk_indices,
    transpose_last,
)
from .tensor.gradcheck import ROUTING_MARGIN_KEY
from .tensor.ops import select0

# The routing term of the analytic cost model charges two FLOPs per
# multiply-accumulate of the region affinity product.
ROUTING_MAC_WEIGHT = 2


@dataclass(frozen=True)
class BraConfig:
    partition: int
    topk: int
    heads: int
    channels: int
    lce_kernel: int = 5

    def __post_init__(self):
        if self.partition < 1:
            raise ConfigurationError(f"partition must be >= 1, got {self.partition}")
        if not 1 <= self.topk <= self.regions:
            raise ConfigurationError(
                f"topk must satisfy 1 <= k <= S^2 = {self.regions}, got k={self.topk}"
            )
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigurationError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        if self.lce_kernel < 1 or self.lce_kernel % 2 == 0:
            raise ConfigurationError(f"lce_kernel must be odd, got {self.lce_kernel}")

    @property
    def regions(self) -> int:
        return self.partition * self.partition

    def check_map(self, height: int, width: int) -> None:
        s = self.partition
        if height % s or width % s:
            raise ConfigurationError(
                f"feature map {height}x{width} not divisible by partition {s} (no padding)"
            )


@dataclass
class BraParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    lce: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo, self.lce]

    @classmethod
    def from_list(cls, ts) -> "BraParams":
        return cls(*ts)

    def check(self, cfg: BraConfig) -> None:
        c = cfg.channels
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (c, c):
                raise DimensionError(f"{name} shape {getattr(self, name).shape} != {(c, c)}")
        s = cfg.lce_kernel
        if self.lce.shape != (s, s, c):
            raise DimensionError(f"lce shape {self.lce.shape} != {(s, s, c)}")


def random_bra_params(cfg: BraConfig, rng: np.random.Generator, std: Optional[float] = None,
                      dtype=np.float32) -> BraParams:
    c = cfg.channels
    std = 1.0 / math.sqrt(c) if std is None else std

    def w(*shape):
        return Tensor(rng.normal(0.0, std, shape), dtype=dtype)

    s = cfg.lce_kernel
    return BraParams(w(c, c), w(c, c), w(c, c), w(c, c), w(s, s, c))


@dataclass
class RoutingTable:
    affinity: Tensor
    indices: IndexTensor

    @property
    def margin(self) -> float:
        return routing_margin(self.affinity.data, self.indices.shape[-1])


def routing_margin(affinity: np.ndarray, k: int) -> float:
    """Smallest gap between the k-th and (k+1)-th affinity over all rows."""
    n = affinity.shape[-1]
    if k >= n:
        return math.inf
    ordered = -np.sort(-affinity, axis=-1)
    return float((ordered[..., k - 1] - ordered[..., k]).min())


# ---------------------------------------------------------------------------
# Region partition
# ---------------------------------------------------------------------------


def patchify(x: Tensor, partition: int) -> Tensor:
    """``[H, W, C] -> [S^2, HW/S^2, C]``; regions and in-region tokens row-major."""
    if x.ndim != 3:
        raise DimensionError(f"patchify expects [H, W, C], got {x.shape}")
    h, w, c = x.shape
    s = partition
    if s < 1 or h % s or w % s:
        raise ConfigurationError(f"map {h}x{w} not divisible by partition {s}")
    rh, rw = h // s, w // s
    t = reshape(x, (s, rh, s, rw, c))
    t = permute(t, (0, 2, 1, 3, 4))
    return reshape(t, (s * s, rh * rw, c))


def unpatchify(xr: Tensor, partition: int, height: int, width: int) -> Tensor:
    s = partition
    if s < 1 or height % s or width % s:
        raise DimensionError(f"map {height}x{width} not divisible by partition {s}")
    rh, rw = height // s, width // s
    if xr.ndim != 3 or xr.shape[:2] != (s * s, rh * rw):
        raise DimensionError(
            f"unpatchify: {xr.shape} inconsistent with {height}x{width}, partition {s}"
        )
    c = xr.shape[2]
    t = reshape(xr, (s, s, rh, rw, c))
    t = permute(t, (0, 2, 1, 3, 4))
    return reshape(t, (height, width, c))


# ---------------------------------------------------------------------------
# Routing and attention
# ---------------------------------------------------------------------------


def route_regions(q: Tensor, k: Tensor, topk: int, *, detach: bool = True) -> RoutingTable:
    """Region affinity ``mean(q) mean(k)^T`` pruned to the top ``topk`` per row.

    No scaling and no softmax: only the ranking is used. With ``detach`` the
    affinity subgraph is kept off the tape; either way no gradient reaches
    it, since the indices are its only consumer.
    """
    n = q.shape[0]
    if not 1 <= topk <= n:
        raise ConfigurationError(f"topk must satisfy 1 <= k <= S^2 = {n}, got k={topk}")
    tape = current_tape()
    ctx = no_tape() if detach else contextlib.nullcontext()
    with ctx, mac_scope("routing", ROUTING_MAC_WEIGHT):
        affinity = matmul(mean_axis(q, 1), transpose_last(mean_axis(k, 1)))
    table = RoutingTable(affinity, topk_indices(affinity, topk))
    if tape is not None:
        tape.note_min(ROUTING_MARGIN_KEY, table.margin)
    return table


def _split_heads(x: Tensor, heads: int) -> Tensor:
    r, t, c = x.shape
    return permute(reshape(x, (r, t, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    r, h, t, d = x.shape
    return reshape(permute(x, (0, 2, 1, 3)), (r, t, h * d))


def bra_forward(x: Tensor, cfg: BraConfig, params: BraParams, *,
                detach_routing: bool = True, trace: Optional[dict] = None) -> Tensor:
    """Bi-level routing attention of a ``[H, W, C]`` map (or ``[B, H, W, C]``).

    ``trace``, when given, receives the routing table and the post-softmax
    attention weights ``[S^2, heads, t, k*t]``.
    """
    if x.ndim == 4:
        return stack([
            bra_forward(select0(x, i), cfg, params, detach_routing=detach_routing, trace=trace)
            for i in range(x.shape[0])
        ])
    if x.ndim != 3:
        raise DimensionError(f"bra_forward expects [H, W, C], got {x.shape}")
    h, w, c = x.shape
    if c != cfg.channels:
        raise DimensionError(f"input channels {c} != configured {cfg.channels}")
    cfg.check_map(h, w)
    params.check(cfg)
    s2 = cfg.regions
    tokens = h * w // s2
    gathered = cfg.topk * tokens

    xr = patchify(x, cfg.partition)
    with mac_scope("proj"):
        q = matmul(xr, params.wq)
        k = matmul(xr, params.wk)
        v = matmul(xr, params.wv)

    table = route_regions(q, k, cfg.topk, detach=detach_routing)
    kg = reshape(gather_axis0(k, table.indices), (s2, gathered, c))
    vg = reshape(gather_axis0(v, table.indices), (s2, gathered, c))

    with mac_scope("attn"):
        weights = attention_weights(_split_heads(q, cfg.heads), _split_heads(kg, cfg.heads))
        heads_out = matmul(weights, _split_heads(vg, cfg.heads))
    out = unpatchify(_merge_heads(heads_out), cfg.partition, h, w)

    with mac_scope("lce"):
        local = depthwise_conv2d(unpatchify(v, cfg.partition, h, w), params.lce)
    with mac_scope("out"):
        y = matmul(add(out, local), params.wo)

    if trace is not None:
        trace["routing"] = table
        trace["weights"] = weights
    return y


# ---------------------------------------------------------------------------
# Routing export
# ---------------------------------------------------------------------------


def region_of(row: int, col: int, height: int, width: int, partition: int) -> tuple[int, int]:
    """(region index, token index within region) of map position (row, col)."""
    rh, rw = height // partition, width // partition
    region = (row // rh) * partition + col // rw
    token = (row % rh) * rw + col % rw
    return region, token


def token_position(region: int, token: int, height: int, width: int,
                   partition: int) -> tuple[int, int]:
    rh, rw = height // partition, width // partition
    ri, rj = divmod(region, partition)
    ti, tj = divmod(token, rw)
    return ri * rh + ti, rj * rw + tj


def routing_report(table: RoutingTable, weights: Tensor, query_position: tuple[int, int],
                   height: int, width: int, partition: int) -> tuple[dict, np.ndarray]:
    """Report + float heatmap ``[H, W]`` for one query from captured internals."""
    row, col = query_position
    if not (0 <= row < height and 0 <= col < width):
        raise ArgumentError(f"query position {query_position} outside {height}x{width} map")
    region, token = region_of(row, col, height, width, partition)
    routed = [int(r) for r in table.indices.data[region]]
    per_head = weights.data[region, :, token, :].astype(np.float64)
    attn_row = per_head.mean(axis=0)

    tokens = (height // partition) * (width // partition)
    heat = np.zeros((height, width), dtype=np.float64)
    for j, r in enumerate(routed):
        for tt in range(tokens):
            y, x = token_position(r, tt, height, width, partition)
            heat[y, x] = attn_row[j * tokens + tt]

    report = {
        "query_position": [int(row), int(col)],
        "region_index": int(region),
        "routed_regions": routed,
        "attention_row": [float(a) for a in attn_row],
        "attention_row_per_head": [[float(a) for a in hr] for hr in per_head],
    }
    return report, heat


def export_routing(x: Tensor, cfg: BraConfig, params: BraParams,
                   query_position: tuple[int, int]) -> tuple[dict, np.ndarray]:
    """Routed regions and attention response of the query at (row, col).

    The attention row is averaged over heads and follows gathered-token
    order (routed regions in index-row order, tokens row-major inside).
    """
    h, w, _ = x.shape
    row, col = query_position
    if not (0 <= row < h and 0 <= col < w):
        raise ArgumentError(f"query position {query_position} outside {h}x{w} map")
    trace: dict = {}
    bra_forward(x, cfg, params, trace=trace)
    return routing_report(trace["routing"], trace["weights"], query_position, h, w, cfg.partition)


def heatmap_to_uint8(heat: np.ndarray) -> np.ndarray:
    """Min-max normalize a map to 8-bit grayscale."""
    lo, hi = float(heat.min()), float(heat.max())
    if hi <= lo:
        return np.zeros(heat.shape, dtype=np.uint8)
    return np.round((heat - lo) / (hi - lo) * 255.0).astype(np.uint8)
