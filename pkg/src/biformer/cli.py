"""Command-line harness: ``check``, ``flops``, ``bench`` and ``route``.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import verify
from .bra import BraConfig, heatmap_to_uint8, routing_report
from .complexity import flops_bra, flops_model, rows_to_csv, scaling_report
from .errors import BiformerError
from .imageio import load_image, save_gray
from .model import (
    ModelSpec,
    fingerprint,
    get_preset,
    init_params,
    load_params,
    model_forward,
    param_count,
    stage_maps,
)
from .tensor import Tensor

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_SEED = 0
CONFIG_SECTIONS = ("model", "bra", "bench")


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


@dataclass
class RunReport:
    command: str
    config: dict
    metrics: dict
    seed: int
    timing: dict = field(default_factory=dict)

    def canonical(self) -> dict:
        """Everything except wall-clock measurements."""
        return {"command": self.command, "config": self.config, "metrics": self.metrics,
                "seed": self.seed}

    def to_json(self, canonical: bool = False) -> str:
        body = self.canonical() if canonical else {**self.canonical(), "timing": self.timing}
        return json.dumps(body, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def default_config_path() -> Path:
    return Path(str(resources.files("biformer") / "data" / "default_config.json"))


def load_config(path: Optional[str]) -> tuple[dict, Path]:
    cfg_path = Path(path) if path else default_config_path()
    try:
        config = json.loads(cfg_path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {cfg_path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {cfg_path} is not valid JSON: {exc}")
    if not isinstance(config, dict):
        raise UsageError(f"config {cfg_path} must be a JSON object")
    unknown = set(config) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"config {cfg_path}: unknown sections {sorted(unknown)}")
    return config, cfg_path.parent


def resolve_seed(flag: Optional[int], config_value: Optional[int] = None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("BRA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"BRA_SEED must be an integer, got {env!r}")
    return DEFAULT_SEED if config_value is None else int(config_value)


def resolve_spec(name: Optional[str], model_section: dict) -> ModelSpec:
    """Preset name, or path to a ModelSpec JSON file."""
    target = name or model_section.get("preset", "biformer-t")
    if target.endswith(".json"):
        return ModelSpec.load(target)
    return get_preset(target)


def write_outputs(out: Optional[str], stem: str, report: RunReport,
                  csv_text: Optional[str] = None, extra: Optional[dict] = None) -> None:
    if not out:
        return
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{stem}.json").write_text(report.to_json() + "\n")
    if csv_text is not None:
        (d / f"{stem}.csv").write_text(csv_text)
    for name, text in (extra or {}).items():
        (d / name).write_text(text)


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def _bra_section(config: dict) -> tuple[BraConfig, int, int, dict]:
    sec = dict(config.get("bra", {}))
    try:
        cfg = BraConfig(
            partition=int(sec.get("partition", 2)),
            topk=int(sec.get("topk", 2)),
            heads=int(sec.get("heads", 2)),
            channels=int(sec.get("channels", 16)),
            lce_kernel=int(sec.get("lce_kernel", 5)),
        )
        h, w = int(sec.get("height", 8)), int(sec.get("width", 8))
        cfg.check_map(h, w)
    except (BiformerError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid bra config: {exc}")
    return cfg, h, w, sec


def cmd_check(args) -> int:
    config, base = load_config(args.config)
    cfg, h, w, sec = _bra_section(config)
    seed = resolve_seed(args.seed, sec.get("seed"))
    seeds = [seed + int(s) for s in sec.get("seeds", [0, 1, 2])]
    results = [
        verify.check_oracle(cfg, h, w, seeds, float(sec.get("oracle_tol", 1e-5))),
        verify.check_degeneracy(cfg, h, w, seeds, float(sec.get("degeneracy_tol", 1e-10))),
        verify.check_gradient(cfg, h, w, seed, float(sec.get("gradient_h", 1e-5)),
                              float(sec.get("gradient_tol", 1e-5))),
        verify.check_identity(int(sec.get("identity_trials", 100)), seed,
                              float(sec.get("identity_tol", 1e-6))),
        verify.check_mac_accounting(cfg, h, w),
    ]
    fixture = args.fixture or sec.get("fixture")
    if fixture:
        fpath = Path(fixture) if args.fixture else base / fixture
        try:
            data = json.loads(fpath.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read fixture {fpath}: {exc}")
        try:
            results.append(verify.check_fixture(data, float(sec.get("fixture_tol", 1e-9))))
        except (KeyError, TypeError, ValueError) as exc:
            results.append(verify.CheckResult("fixture", float("inf"), 0.0, f"malformed: {exc}"))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    report = RunReport(
        command="check",
        config={"bra": {**sec, "height": h, "width": w}},
        metrics={r.name: r.as_dict() for r in results},
        seed=seed,
    )
    write_outputs(args.out, "check_report", report)
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# flops
# ---------------------------------------------------------------------------


def cmd_flops(args) -> int:
    if args.scaling:
        tokens = args.tokens or [256, 1024, 4096, 16384]
        rep = scaling_report(tokens, args.C or 64, args.k or 4, frozen_partition=args.frozen)
        for row in rep.rows:
            print(f"HW={row['HW']:>7}  S={row['S']:>3}  routing+attn={row['routing'] + row['attn']}")
        print(f"slope = {rep.slope:.4f}")
        report = RunReport("flops", {"scaling": True, "tokens": list(tokens), "C": args.C or 64,
                                     "k": args.k or 4, "frozen": args.frozen},
                           {"slope": rep.slope, "rows": rep.rows}, seed=0)
        loglog = "log_HW,log_flops\n" + "".join(f"{a!r},{b!r}\n" for a, b in rep.loglog())
        write_outputs(args.out, "scaling", report, rows_to_csv(rep.rows),
                      {"scaling_loglog.csv": loglog})
        return EXIT_OK

    if args.model:
        config, _ = load_config(args.config) if args.config else ({}, None)
        spec = resolve_spec(args.model, config.get("model", {}))
        res = args.res or config.get("model", {}).get("res", 224)
        mf = flops_model(spec, res, res)
        params = param_count(spec)
        print(f"{'model':<16}{'res':>6}{'params':>14}{'FLOPs':>16}")
        print(f"{spec.name:<16}{res:>6}{params:>14,}{mf.total:>16,}")
        print(f"params = {params / 1e6:.2f}M, FLOPs = {mf.total / 1e9:.3f}G")
        report = RunReport("flops", {"model": spec.to_dict(), "res": res},
                           {"params": params, "flops": mf.total}, seed=0)
        maps = stage_maps(spec, res, res)
        rows = []
        for i, (hh, ww) in enumerate(maps):
            fb = flops_bra(hh, ww, spec.stage_channels[i], spec.partition[i], spec.topk[i])
            rows.append({"HW": hh * ww, "S": spec.partition[i], "k": spec.topk[i], **fb.as_dict()})
        layers = "layer,macs\n" + "".join(f"{n},{m}\n" for n, m in mf.layers)
        write_outputs(args.out, "flops", report, rows_to_csv(rows), {"flops_layers.csv": layers})
        return EXIT_OK

    missing = [n for n in ("H", "W", "C", "S", "k") if getattr(args, n) is None]
    if missing:
        raise UsageError(f"flops needs --model, --scaling, or all of --H --W --C --S --k "
                         f"(missing {', '.join('--' + m for m in missing)})")
    fb = flops_bra(args.H, args.W, args.C, args.S, args.k)
    row = {"HW": args.H * args.W, "S": args.S, "k": args.k, **fb.as_dict()}
    print(f"{'proj':>14}{'routing':>14}{'attn':>14}{'total':>14}")
    print(f"{fb.proj:>14}{fb.routing:>14}{fb.attn:>14}{fb.total:>14}")
    report = RunReport("flops", {"H": args.H, "W": args.W, "C": args.C, "S": args.S, "k": args.k},
                       fb.as_dict(), seed=0)
    write_outputs(args.out, "flops", report, rows_to_csv([row]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _random_image(res: int, seed: int) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((res, res, 3)), dtype=np.float32)


def cmd_bench(args) -> int:
    config, _ = load_config(args.config) if args.config else ({}, None)
    bench = config.get("bench", {})
    spec = resolve_spec(args.model, config.get("model", {}))
    res = args.res or bench.get("res") or config.get("model", {}).get("res", 224)
    iters = args.iters or int(bench.get("iters", 5))
    warmup = args.warmup if args.warmup is not None else int(bench.get("warmup", 1))
    if iters < 1 or warmup < 0:
        raise UsageError(f"iters must be >= 1 and warmup >= 0, got {iters}, {warmup}")
    seed = resolve_seed(args.seed, bench.get("seed"))
    stage_maps(spec, res, res)
    params = init_params(spec, seed)
    image = _random_image(res, seed)

    for _ in range(warmup):
        model_forward(image, spec, params)
    times, prints = [], []
    for _ in range(iters):
        t0 = time.perf_counter()
        logits = model_forward(image, spec, params)
        times.append(time.perf_counter() - t0)
        prints.append(fingerprint(logits))
    q1, median, q3 = (float(v) for v in np.percentile(times, [25, 50, 75]))
    stable = len(set(prints)) == 1
    print(f"{spec.name} @ {res}: median {median * 1e3:.2f} ms/image, IQR {(q3 - q1) * 1e3:.2f} ms, "
          f"fingerprint {prints[0]} ({'stable' if stable else 'UNSTABLE'})")
    report = RunReport(
        command="bench",
        config={"model": spec.to_dict(), "res": res, "iters": iters, "warmup": warmup},
        metrics={"fingerprint": prints[0], "fingerprints_identical": stable},
        seed=seed,
        timing={"median_s": median, "iqr_s": q3 - q1, "times_s": times},
    )
    write_outputs(args.out, "bench", report)
    if args.json:
        print(report.to_json())
    return EXIT_OK if stable else EXIT_FAIL


# ---------------------------------------------------------------------------
# route
# ---------------------------------------------------------------------------


def cmd_route(args) -> int:
    config, _ = load_config(args.config) if args.config else ({}, None)
    spec = resolve_spec(args.model, config.get("model", {}))
    seed = resolve_seed(args.seed)
    try:
        image = load_image(args.input)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load image {args.input}: {exc}")
    height, width = image.shape[:2]
    maps = stage_maps(spec, height, width)
    stage = args.stage - 1
    if not 0 <= stage < spec.num_stages:
        raise UsageError(f"--stage must be in 1..{spec.num_stages}, got {args.stage}")
    if not 0 <= args.block < spec.blocks[stage]:
        raise UsageError(f"--block must be in 0..{spec.blocks[stage] - 1}, got {args.block}")
    if not (0 <= args.x < width and 0 <= args.y < height):
        raise UsageError(f"query ({args.x}, {args.y}) outside {width}x{height} image")
    params = load_params(args.weights) if args.weights else init_params(spec, seed)

    trace: dict = {}
    model_forward(image, spec, params, capture={(stage, args.block): trace})
    mh, mw = maps[stage]
    row, col = args.y * mh // height, args.x * mw // width
    report, heat = routing_report(trace["routing"], trace["weights"], (row, col), mh, mw,
                                  spec.partition[stage])
    report.update({
        "stage": args.stage,
        "block": args.block,
        "map_shape": [mh, mw],
        "partition": spec.partition[stage],
        "topk": spec.topk[stage],
        "image_position": [args.x, args.y],
    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "route.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    save_gray(out / f"heatmap.{args.format}", heatmap_to_uint8(heat))
    print(f"stage {args.stage} block {args.block}: query map position ({row}, {col}) in region "
          f"{report['region_index']} routes to {report['routed_regions']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run the BRA invariant suites")
    p.add_argument("--config", help="JSON config with sections model/bra/bench")
    p.add_argument("--fixture", help="override the frozen fixture file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory for check_report.json")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("flops", help="analytic FLOPs and parameter counts")
    p.add_argument("--model", help="preset name or ModelSpec JSON path")
    p.add_argument("--res", type=int)
    for name in ("H", "W", "C", "S", "k"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--scaling", action="store_true", help="fit the cost-vs-tokens slope")
    p.add_argument("--tokens", type=int, nargs="+", help="token counts of square maps")
    p.add_argument("--frozen", type=int, help="keep one partition factor for the whole sweep")
    p.add_argument("--config")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="time forward passes")
    p.add_argument("--model")
    p.add_argument("--res", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--json", action="store_true", help="print the full report")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("route", help="export routed regions and an attention heatmap")
    p.add_argument("--input", required=True, help="PPM/PNG image or [3, H, W] tensor .bin")
    p.add_argument("--x", type=int, required=True, help="query column in image pixels")
    p.add_argument("--y", type=int, required=True, help="query row in image pixels")
    p.add_argument("--stage", type=int, default=1, help="1-based stage")
    p.add_argument("--block", type=int, default=0, help="0-based block within the stage")
    p.add_argument("--model")
    p.add_argument("--weights", help="parameter directory written by save_params")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    p.add_argument("--out", default="route-out")
    p.set_defaults(func=cmd_route)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, BiformerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
