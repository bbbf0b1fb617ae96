"""Benchmark CLI: run a synthetic stream through the compressed cache and emit metrics."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from .bench.harness import check_properties, emit, run_benchmark
from .bench.workload import WorkloadConfig
from .stream_cache import CacheConfig, ConfigError
from .tensors import FrameLayout

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROPERTY = 3


def _budget(text: str) -> float:
    if text.lower() in ("inf", "none", "unbounded"):
        return math.inf
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"budget must be an integer or 'inf', got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvstream-bench", description=__doc__)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--tokens-per-frame", type=int, default=64, help="1 camera + registers + patches")
    p.add_argument("--registers", type=int, default=4)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=64)
    p.add_argument("--budget", type=_budget, default=2048, help="cache budget in tokens, or 'inf'")
    p.add_argument("--pool-size", type=int, default=16)
    p.add_argument("--bits", type=int, default=4, choices=(2, 4, 8))
    p.add_argument("--group-size", type=int, default=64)
    p.add_argument("--no-quant", action="store_true", help="keep the cache in float32")
    p.add_argument("--oracle", action="store_true", help="compare every frame against the float64 full cache")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outlier-frac", type=float, default=1 / 16)
    p.add_argument("--outlier-scale", type=float, default=20.0)
    p.add_argument("--ar-coeff", type=float, default=0.5)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", default="-", help="output path, '-' for stdout")
    p.add_argument("--snapshot", type=Path, help="write the final cache snapshot here")
    p.add_argument("--assert-properties", action="store_true",
                   help="exit 3 if a run-level property (budget, memory trend, latency) fails")
    return p


def configs_from_args(args: argparse.Namespace) -> tuple[WorkloadConfig, CacheConfig]:
    try:
        layout = FrameLayout.from_total(args.tokens_per_frame, args.registers)
        workload = WorkloadConfig(
            frames=args.frames, layout=layout, heads=args.heads, head_dim=args.head_dim, seed=args.seed,
            outlier_channels=args.outlier_frac, outlier_scale=args.outlier_scale,
            temporal_correlation=args.ar_coeff,
        )
        cache = CacheConfig(
            heads=args.heads, head_dim=args.head_dim, layout=layout, budget=args.budget,
            pool_size=args.pool_size, bits=args.bits, group_size=args.group_size,
            quantization_enabled=not args.no_quant,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return workload, cache


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        workload, cache_cfg = configs_from_args(args)
        metrics, cache = run_benchmark(workload, cache_cfg, compare_oracle=args.oracle)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        emit(metrics, args.format, args.out)
        if args.snapshot is not None:
            args.snapshot.write_bytes(cache.snapshot())
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.assert_properties:
        failed = False
        for name, ok, detail in check_properties(metrics, cache_cfg):
            status = "skip" if ok is None else ("pass" if ok else "FAIL")
            print(f"{status:4} {name}: {detail}", file=sys.stderr)
            failed |= ok is False
        if failed:
            return EXIT_PROPERTY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
