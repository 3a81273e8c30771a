"""Central-difference verification of tape gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ArgumentError, EvaluationError
from .core import Tape, Tensor, no_tape

ROUTING_MARGIN_KEY = "routing_margin"

LossFn = Callable[[Sequence[Tensor]], Tensor]


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float]
    entries: int
    resamples: int
    routing_margin: float
    tolerance: float
    analytic: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _evaluate(f: LossFn, params: Sequence[Tensor]) -> float:
    with no_tape():
        value = f(params).item()
    if not math.isfinite(value):
        raise EvaluationError(f"non-finite loss {value}")
    return value


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: LossFn,
    params: Sequence[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-5,
    *,
    margin: float = 1e-3,
    resample: Optional[Callable[[int], tuple[LossFn, Sequence[Tensor]]]] = None,
    max_resamples: int = 20,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``. If the
    forward pass reports a top-k routing margin below ``margin``, the point
    sits too close to a ranking discontinuity; ``resample(attempt)`` is then
    asked for a fresh ``(f, params)`` pair.
    """
    if h <= 0:
        raise ArgumentError(f"step h must be positive, got {h}")
    attempt = 0
    while True:
        if any(p.dtype != np.float64 for p in params):
            raise ArgumentError("gradient checks require double precision parameters")
        with Tape() as tape:
            tape.watch(*params)
            loss = f(params)
        if not math.isfinite(loss.item()):
            raise EvaluationError(f"non-finite loss {loss.item()}")
        route_margin = tape.notes.get(ROUTING_MARGIN_KEY, math.inf)
        if route_margin >= margin:
            break
        if resample is None or attempt >= max_resamples:
            raise EvaluationError(
                f"routing margin {route_margin:.3g} below {margin:g} and no resample left"
            )
        attempt += 1
        f, params = resample(attempt)

    analytic = tape.gradient(loss, params)
    per_param = []
    entries = 0
    for pi, (p, ga) in enumerate(zip(params, analytic)):
        base = p.data
        numeric = np.empty(p.shape, dtype=np.float64)
        for flat in range(p.size):
            probe = base.copy()
            pos = np.unravel_index(flat, p.shape)
            probe[pos] = base[pos] + h
            plus = _evaluate(f, _swap(params, pi, probe))
            probe[pos] = base[pos] - h
            minus = _evaluate(f, _swap(params, pi, probe))
            numeric[pos] = (plus - minus) / (2.0 * h)
        per_param.append(float(relative_error(ga, numeric, floor).max()))
        entries += p.size
    return GradCheckReport(
        max_rel_error=max(per_param) if per_param else 0.0,
        per_param=per_param,
        entries=entries,
        resamples=attempt,
        routing_margin=route_margin,
        tolerance=tolerance,
        analytic=analytic,
    )


def _swap(params: Sequence[Tensor], i: int, arr: np.ndarray) -> list[Tensor]:
    out = list(params)
    out[i] = Tensor(arr)
    return out
