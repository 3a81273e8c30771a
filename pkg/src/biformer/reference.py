"""Loop-based float64 oracles, written without the tensor engine.

These exist to be slow and obviously correct: every query token walks its
own routed regions explicitly. The ``check`` command and the test suite
compare the vectorized paths against them.
"""

from __future__ import annotations

import math

import numpy as np


def routed_regions_reference(q: np.ndarray, k: np.ndarray, height: int, width: int,
                             partition: int, topk: int) -> tuple[list[list[int]], float]:
    """Per-region routed set and the smallest top-k margin.

    ``q`` and ``k`` are projected maps ``[H, W, C]``.
    """
    s = partition
    rh, rw = height // s, width // s
    n = s * s
    c = q.shape[-1]
    qr = np.zeros((n, c))
    kr = np.zeros((n, c))
    for y in range(height):
        for x in range(width):
            r = (y // rh) * s + x // rw
            qr[r] += q[y, x]
            kr[r] += k[y, x]
    qr /= rh * rw
    kr /= rh * rw
    routed = []
    margin = math.inf
    for i in range(n):
        scores = [float(qr[i] @ kr[j]) for j in range(n)]
        order = sorted(range(n), key=lambda j: (-scores[j], j))
        routed.append(order[:topk])
        if topk < n:
            margin = min(margin, scores[order[topk - 1]] - scores[order[topk]])
    return routed, margin


def depthwise_reference(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    s = kernel.shape[0]
    p = s // 2
    out = np.zeros((h, w, c))
    for y in range(h):
        for xx in range(w):
            for i in range(s):
                for j in range(s):
                    yy, xj = y + i - p, xx + j - p
                    if 0 <= yy < h and 0 <= xj < w:
                        out[y, xx] += x[yy, xj] * kernel[i, j]
    return out


def bra_reference(x: np.ndarray, partition: int, topk: int, heads: int,
                  wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray,
                  lce: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-query brute-force bi-level routing attention in float64.

    Returns the output map and the routing margin of the instance.
    """
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    s = partition
    rh, rw = h // s, w // s
    d = c // heads
    q = x @ wq.astype(np.float64)
    k = x @ wk.astype(np.float64)
    v = x @ wv.astype(np.float64)
    routed, margin = routed_regions_reference(q, k, h, w, s, topk)

    attn = np.zeros((h, w, c))
    for y in range(h):
        for xx in range(w):
            region = (y // rh) * s + xx // rw
            keys = []
            for r in routed[region]:
                ri, rj = divmod(r, s)
                for ty in range(rh):
                    for tx in range(rw):
                        keys.append((ri * rh + ty, rj * rw + tx))
            for hd in range(heads):
                sl = slice(hd * d, (hd + 1) * d)
                logits = np.array([q[y, xx, sl] @ k[ky, kx, sl] for ky, kx in keys]) / math.sqrt(d)
                logits -= logits.max()
                p = np.exp(logits)
                p /= p.sum()
                for weight, (ky, kx) in zip(p, keys):
                    attn[y, xx, sl] += weight * v[ky, kx, sl]

    local = depthwise_reference(v, np.asarray(lce, dtype=np.float64))
    return (attn + local) @ wo.astype(np.float64), margin


def mean_pairwise_affinity(q: np.ndarray, k: np.ndarray, omega, omega_prime) -> float:
    """Average of ``q_i . k_j`` over all pairs of the two index sets."""
    total = 0.0
    for i in omega:
        for j in omega_prime:
            total += float(q[i] @ k[j])
    return total / (len(omega) * len(omega_prime))


def affinity_of_means(q: np.ndarray, k: np.ndarray, omega, omega_prime) -> float:
    return float(q[list(omega)].mean(axis=0) @ k[list(omega_prime)].mean(axis=0))
