"""Acceptance criteria, each measured at its stated tolerance and time budget.

Every test appends one ``[PASS]``/``[FAIL]`` line to the acceptance log,
printed in the pytest terminal summary, before asserting.
"""

import json
import time

import numpy as np
import pytest

from biformer import cli, verify
from biformer.bra import BraConfig
from biformer.complexity import (
    continuous_lower_bound,
    flops_bra,
    flops_model,
    optimal_partition,
    scaling_report,
)
from biformer.model import get_preset, param_count

TOKEN_COUNTS = [256, 1024, 4096, 16384]


def record(log, number, name, ok, detail, elapsed=None, budget=None):
    timing = "" if elapsed is None else f" [{elapsed:.2f}s / {budget:g}s]"
    log.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {name}: {detail}{timing}")
    return ok


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def test_1_oracle_equivalence(acceptance_log):
    with Timer() as t:
        worst, configs = 0.0, 0
        for cfg, side in verify.oracle_grid():
            dev, _ = verify.oracle_deviation(cfg, side, side, seed=0, dtype=np.float32)
            worst = max(worst, dev)
            configs += 1
    ok = worst < 1e-5 and t.elapsed < 30
    assert record(acceptance_log, 1, "oracle equivalence", ok,
                  f"max |dev| {worst:.2e} < 1e-5 over {configs} configs", t.elapsed, 30)


def test_2_full_attention_degeneracy(acceptance_log):
    with Timer() as t:
        worst = 0.0
        for cfg, side in [(BraConfig(2, 4, 2, 16), 8), (BraConfig(4, 16, 1, 8), 8),
                          (BraConfig(1, 1, 2, 8), 4)]:
            for seed in range(10):
                worst = max(worst, verify.full_attention_deviation(cfg, side, side, seed))
    ok = worst < 1e-10 and t.elapsed < 10
    assert record(acceptance_log, 2, "full-attention degeneracy", ok,
                  f"max |dev| {worst:.2e} < 1e-10 on 10 seeds x 3 configs", t.elapsed, 10)


def test_3_gradient_correctness(acceptance_log):
    with Timer() as t:
        tiny = verify.check_gradient(BraConfig(2, 1, 2, 8), 4, 4, seed=0, h=1e-5, tol=1e-4)
        model = verify.check_model_gradient(verify.miniature_spec(), 32, 32, seed=0,
                                            h=1e-5, tol=1e-4)
    ok = tiny.passed and model.passed and t.elapsed < 120
    assert record(acceptance_log, 3, "gradient correctness", ok,
                  f"tiny BRA {tiny.error:.2e} ({tiny.detail}); 2-block model {model.error:.2e} "
                  f"({model.detail}); tol 1e-4", t.elapsed, 120)


def test_4_pooled_affinity_identity(acceptance_log):
    with Timer() as t:
        res = verify.check_identity(100, seed=0, tol=1e-6)
    ok = res.passed and t.elapsed < 5
    assert record(acceptance_log, 4, "pooled affinity identity", ok,
                  f"max rel err {res.error:.2e} < 1e-6 over 100 instances", t.elapsed, 5)


MAC_CASES = [
    (BraConfig(2, 1, 1, 4), 8),
    (BraConfig(1, 1, 2, 8), 4),
    (BraConfig(2, 3, 2, 16), 8),
    (BraConfig(4, 5, 2, 8), 8),
    (BraConfig(4, 16, 1, 8), 8),
    (BraConfig(7, 4, 2, 16), 14),
]


def test_5_mac_accounting(acceptance_log):
    mismatches = [verify.mac_mismatch(cfg, side, side) for cfg, side in MAC_CASES]
    counted = verify.counted_macs(BraConfig(2, 1, 1, 4), 8, 8)
    derived = counted["proj"] + counted["routing"] + counted["attn"]
    ok = not any(mismatches) and derived == 11392
    assert record(acceptance_log, 5, "MAC accounting", ok,
                  f"{len(MAC_CASES)} configs exact (mismatches {mismatches}); "
                  f"(8,8,4,2,1) counted {derived}")


def test_6_complexity_scaling(acceptance_log):
    with Timer() as t:
        adaptive = scaling_report(TOKEN_COUNTS, 64, 4)
        first_s = adaptive.rows[0]["S"]
        frozen = scaling_report(TOKEN_COUNTS, 64, 4, frozen_partition=first_s)
    ok = abs(adaptive.slope - 4 / 3) <= 0.1 and frozen.slope > 1.8 and t.elapsed < 5
    assert record(acceptance_log, 6, "complexity scaling", ok,
                  f"slope {adaptive.slope:.4f} (S={[r['S'] for r in adaptive.rows]}), "
                  f"frozen S={first_s} slope {frozen.slope:.4f}", t.elapsed, 5)


REPORTED = {"biformer-t": (13e6, 2.2e9), "biformer-s": (26e6, 4.5e9), "biformer-b": (57e6, 9.8e9)}


def test_7_reported_model_sizes(acceptance_log):
    parts, ok = [], True
    for name, (params_ref, flops_ref) in REPORTED.items():
        spec = get_preset(name)
        params = param_count(spec)
        flops = flops_model(spec, 224, 224).total
        ok &= abs(params / params_ref - 1) <= 0.10 and abs(flops / flops_ref - 1) <= 0.15
        parts.append(f"{name} {params / 1e6:.2f}M/{flops / 1e9:.3f}G")
    assert record(acceptance_log, 7, "model sizes", ok, "; ".join(parts))


def test_8_lower_bound(acceptance_log):
    rng = np.random.default_rng(0)
    worst_slack = np.inf
    for _ in range(1000):
        s = int(rng.integers(1, 9))
        r = int(rng.integers(1, 7))
        h, w = s * r, s * int(rng.integers(1, 7))
        c = int(rng.integers(1, 129))
        k = int(rng.integers(1, s * s + 1))
        total = flops_bra(h, w, c, s, k).total
        worst_slack = min(worst_slack, total / continuous_lower_bound(h, w, c, k) - 1)
    # 2 S^4 = k (HW)^2 / S^2 exactly at these points
    tight = []
    for h, w, c, s, k in [(8, 8, 4, 4, 2), (8, 8, 32, 4, 2), (32, 32, 8, 16, 32)]:
        assert optimal_partition(h, w, k) == pytest.approx(s)
        total = flops_bra(h, w, c, s, k).total
        tight.append(abs(total - continuous_lower_bound(h, w, c, k)) / total)
    ok = worst_slack >= -1e-12 and max(tight) < 1e-9
    assert record(acceptance_log, 8, "lower bound", ok,
                  f"min relative slack {worst_slack:.3e} over 1000 tuples; "
                  f"equality error {max(tight):.1e} at the optimum")


def test_9_determinism(acceptance_log, tmp_path, capsys):
    prints = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        rc = cli.main(["bench", "--model", "biformer-t", "--res", "224", "--iters", "2",
                       "--warmup", "0", "--seed", "7", "--out", str(out)])
        assert rc == 0
        prints.append(json.loads((out / "bench.json").read_text())["metrics"]["fingerprint"])
    check_rc = cli.main(["check"])
    capsys.readouterr()
    ok = prints[0] == prints[1] and check_rc == 0
    assert record(acceptance_log, 9, "determinism", ok,
                  f"bench fingerprints {prints[0]} == {prints[1]}; check exit {check_rc}")
