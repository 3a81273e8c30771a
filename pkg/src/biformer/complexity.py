"""Analytic cost model of bi-level routing attention and of whole backbones.

Convention: one multiply-accumulate counts as one FLOP.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class FlopsBreakdown:
    proj: int
    routing: int
    attn: int

    @property
    def total(self) -> int:
        return self.proj + self.routing + self.attn

    def as_dict(self) -> dict:
        return {**asdict(self), "total": self.total}


def flops_bra(height: int, width: int, channels: int, partition: int, topk: int) -> FlopsBreakdown:
    """Projection, routing and token-to-token terms of one BRA layer."""
    hw = height * width
    s2 = partition * partition
    if partition < 1 or hw % s2:
        raise ConfigurationError(f"HW={hw} not divisible by S^2={s2}")
    if not 1 <= topk <= s2:
        raise ConfigurationError(f"topk must satisfy 1 <= k <= S^2 = {s2}, got {topk}")
    return FlopsBreakdown(
        proj=3 * hw * channels * channels,
        routing=2 * s2 * s2 * channels,
        attn=2 * hw * topk * (hw // s2) * channels,
    )


def optimal_partition(height: int, width: int, topk: float) -> float:
    """Partition factor balancing routing against attention cost."""
    hw = height * width
    return (topk / 2.0 * hw * hw) ** (1.0 / 6.0)


def continuous_lower_bound(height: int, width: int, channels: int, topk: float) -> float:
    """AM-GM lower bound on the BRA total over real-valued partitions.

    The routing and attention terms ``2 S^4 C`` and ``2 k (HW)^2 C / S^2`` are
    split into three summands whose product is independent of ``S``, so the
    bound is ``3 C (2 S^4 * (k (HW)^2 / S^2)^2)^(1/3)``, attained exactly
    when ``2 S^4 = k (HW)^2 / S^2``.
    """
    hw = height * width
    return 3.0 * hw * channels ** 2 + 3.0 * channels * (2.0 * topk * topk * float(hw) ** 4) ** (1.0 / 3.0)


def flops_comparators(height: int, width: int, channels: int,
                      windows: Iterable[int] = (7,)) -> dict:
    """Attention-only costs (scores + aggregation) of comparator mechanisms."""
    hw = height * width
    report = {
        "vanilla": 2 * hw * hw * channels,
        "axial": 2 * hw * (height + width) * channels,
    }
    for w in windows:
        report[f"window_{w}"] = 2 * hw * w * w * channels
    return report


# ---------------------------------------------------------------------------
# Scaling sweeps
# ---------------------------------------------------------------------------


Resolution = Union[int, tuple[int, int]]


def _as_map(res: Resolution) -> tuple[int, int]:
    if isinstance(res, int):
        side = math.isqrt(res)
        if side * side != res:
            raise ConfigurationError(f"token count {res} is not a square map")
        return side, side
    return int(res[0]), int(res[1])


def nearest_valid_partition(height: int, width: int, topk: int) -> int:
    """Divisor of both map sides, with S^2 >= k, closest to the optimum."""
    target = optimal_partition(height, width, topk)
    candidates = [s for s in range(1, min(height, width) + 1)
                  if height % s == 0 and width % s == 0 and s * s >= topk]
    if not candidates:
        raise ConfigurationError(f"no valid partition for {height}x{width}, k={topk}")
    best = min(candidates, key=lambda s: (abs(s - target), s))
    if not target / 2.0 <= best <= target * 2.0:
        raise ConfigurationError(
            f"nearest valid partition {best} not within x2 of optimum {target:.3f} "
            f"for {height}x{width}, k={topk}"
        )
    return best


@dataclass
class ScalingReport:
    slope: float
    rows: list[dict] = field(default_factory=list)

    def loglog(self) -> list[tuple[float, float]]:
        return [(math.log(r["HW"]), math.log(r["routing"] + r["attn"])) for r in self.rows]


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=np.float64))
    ly = np.log(np.asarray(ys, dtype=np.float64))
    slope, _ = np.polyfit(lx, ly, 1)
    return float(slope)


def scaling_report(resolutions: Sequence[Resolution], channels: int, topk: int,
                   frozen_partition: int | None = None) -> ScalingReport:
    """Fit how routing + attention cost grows with the token count.

    Each resolution uses the valid partition nearest the optimum, unless
    ``frozen_partition`` pins a single S for the whole sweep.
    """
    if len(resolutions) < 4:
        raise ConfigurationError(f"need >= 4 resolutions, got {len(resolutions)}")
    rows = []
    for res in resolutions:
        h, w = _as_map(res)
        s = frozen_partition if frozen_partition is not None else nearest_valid_partition(h, w, topk)
        fb = flops_bra(h, w, channels, s, topk)
        rows.append({"HW": h * w, "S": s, "k": topk, **fb.as_dict()})
    slope = fit_loglog_slope([r["HW"] for r in rows], [r["routing"] + r["attn"] for r in rows])
    return ScalingReport(slope=slope, rows=rows)


CSV_COLUMNS = ("HW", "S", "k", "proj", "routing", "attn", "total")


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore",
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Whole-model accounting
# ---------------------------------------------------------------------------


@dataclass
class ModelFlops:
    total: int
    layers: list[tuple[str, int]]


def flops_model(spec, height: int, width: int) -> ModelFlops:
    """MAC count of a full forward pass at ``height x width``.

    Counts convolutions, linear layers and the three BRA terms plus the
    local-context convolution and output projection. Normalization,
    activations, softmax and pooling are not multiply-accumulates and are
    left out.
    """
    from .model import stage_maps

    layers: list[tuple[str, int]] = []
    maps = stage_maps(spec, height, width)
    chans = spec.stage_channels
    oh, ow = maps[0]
    sk = spec.stem_kernel
    layers.append(("stem", oh * ow * sk * sk * 3 * chans[0]))
    for i, (h, w) in enumerate(maps):
        c = chans[i]
        if i > 0:
            mk = spec.merge_kernel
            layers.append((f"stage{i + 1}.merge", h * w * mk * mk * chans[i - 1] * c))
        hidden = spec.hidden_channels(i)
        for b in range(spec.blocks[i]):
            name = f"stage{i + 1}.block{b}"
            bra = flops_bra(h, w, c, spec.partition[i], spec.topk[i])
            layers.append((f"{name}.pos", h * w * 9 * c))
            layers.append((f"{name}.attn.proj", bra.proj))
            layers.append((f"{name}.attn.routing", bra.routing))
            layers.append((f"{name}.attn.attn", bra.attn))
            layers.append((f"{name}.attn.lce", h * w * spec.lce_kernel ** 2 * c))
            layers.append((f"{name}.attn.out", h * w * c * c))
            layers.append((f"{name}.mlp", 2 * h * w * c * hidden))
    layers.append(("head", chans[-1] * spec.num_classes))
    return ModelFlops(total=sum(m for _, m in layers), layers=layers)
