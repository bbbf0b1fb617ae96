"""Drive the compressed cache and the float64 oracle side by side and record per-frame metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..attention import ReferenceStream
from ..stream_cache import CacheConfig, ConfigError, StreamingKVCache
from .workload import WorkloadConfig, iter_workload

WARMUP_FRAMES = 3
MAX_RUN_BYTES = 4 << 30
WALL_TIME_FIELDS = frozenset({"wall_time_s", "mean_frame_time_s", "latency_slope_s_per_frame", "latency_slope_ratio"})
FRAME_COLUMNS = ("frame", "wall_time_s", "cache_tokens", "compressed_bytes", "fp16_equivalent_bytes")
ERROR_COLUMN = "rel_l2_error"


@dataclass
class StreamMetrics:
    frames: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    oracle: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([f[name] for f in self.frames], dtype=float)

    def to_dict(self) -> dict:
        return {"config": self.config, "frames": self.frames, "aggregate": self.aggregate}


def _budget_repr(budget: float):
    return "inf" if math.isinf(budget) else int(budget)


def describe(workload: WorkloadConfig, cache_cfg: CacheConfig) -> dict:
    cache = asdict(cache_cfg)
    cache["budget"] = _budget_repr(cache_cfg.budget)
    return {"workload": workload.to_dict(), "cache": cache}


def estimate_run_bytes(workload: WorkloadConfig, cache_cfg: CacheConfig, compare_oracle: bool) -> int:
    """Rough peak resident bytes: decoded float32 cache copies plus the float64 oracle cache."""
    frame = workload.layout.total()
    element = workload.heads * workload.head_dim
    stream = workload.frames * frame
    retained = min(stream, cache_cfg.budget + frame)
    total = 4 * 2 * 3 * retained * element
    if compare_oracle:
        total += 8 * 2 * 2 * stream * element
    return int(total)


def _fit_slope(y: np.ndarray) -> float:
    if y.size < 2:
        return 0.0
    x = np.arange(y.size, dtype=float)
    return float(np.polyfit(x, y, 1)[0])


def saturation_frame(cache_tokens: np.ndarray) -> Optional[int]:
    """First frame from which the cache length never grows again, if it ever plateaus."""
    if cache_tokens.size < 2:
        return None
    grows = np.nonzero(np.diff(cache_tokens) > 0)[0]
    last_growth = int(grows[-1]) + 1 if grows.size else 0
    return last_growth if last_growth < cache_tokens.size - 1 else None


def run_benchmark(
    workload: WorkloadConfig,
    cache_cfg: CacheConfig,
    compare_oracle: bool = False,
    *,
    max_bytes: int = MAX_RUN_BYTES,
) -> tuple[StreamMetrics, StreamingKVCache]:
    if (workload.layout, workload.heads, workload.head_dim) != (cache_cfg.layout, cache_cfg.heads, cache_cfg.head_dim):
        raise ConfigError("workload and cache configs disagree on layout, heads, or head_dim")
    estimate = estimate_run_bytes(workload, cache_cfg, compare_oracle)
    if estimate > max_bytes:
        raise ConfigError(f"run needs about {estimate / 2**30:.1f} GiB, limit is {max_bytes / 2**30:.1f} GiB")

    cache = StreamingKVCache(cache_cfg)
    oracle = ReferenceStream() if compare_oracle else None
    metrics = StreamMetrics(config=describe(workload, cache_cfg), oracle=compare_oracle)
    for i, (q, k, v) in enumerate(iter_workload(workload)):
        start = time.perf_counter()
        out = cache.step(q, k, v)
        elapsed = time.perf_counter() - start
        compressed, fp16 = cache.memory_bytes()
        row = {
            "frame": i,
            "wall_time_s": elapsed,
            "cache_tokens": cache.cache_len(),
            "compressed_bytes": compressed,
            "fp16_equivalent_bytes": fp16,
        }
        if oracle is not None:
            ref = oracle.step(q, k, v).data
            row[ERROR_COLUMN] = float(np.linalg.norm(out.data - ref) / np.linalg.norm(ref))
        metrics.frames.append(row)
    metrics.aggregate = _aggregate(metrics, cache)
    return metrics, cache


def _aggregate(metrics: StreamMetrics, cache: StreamingKVCache) -> dict:
    agg: dict = {"frames": len(metrics.frames)}
    if not metrics.frames:
        return agg
    times = metrics.column("wall_time_s")
    tokens = metrics.column("cache_tokens")
    sat = saturation_frame(tokens)
    fit_from = max(WARMUP_FRAMES, 0 if sat is None else sat)
    window = times[fit_from:]
    slope = _fit_slope(window)
    mean_time = float(window.mean()) if window.size else float(times.mean())
    last = metrics.frames[-1]
    passes = cache.requant_passes()
    agg.update(
        saturation_frame=sat,
        peak_cache_tokens=int(tokens.max()),
        final_cache_tokens=int(tokens[-1]),
        memory_ratio=last["compressed_bytes"] / last["fp16_equivalent_bytes"],
        mean_frame_time_s=mean_time,
        latency_slope_s_per_frame=slope,
        latency_slope_ratio=slope / mean_time if mean_time > 0 else 0.0,
        latency_fit_frames=int(window.size),
        requant_passes_mean=float(passes.mean()) if passes.size else 0.0,
        requant_passes_max=int(passes.max()) if passes.size else 0,
    )
    if metrics.oracle:
        errors = metrics.column(ERROR_COLUMN)
        agg.update(mean_error=float(errors.mean()), max_error=float(errors.max()))
    return agg


def check_properties(metrics: StreamMetrics, cache_cfg: CacheConfig) -> list[tuple[str, Optional[bool], str]]:
    """Evaluate the run-level properties; ``None`` marks a property that does not apply."""
    results: list[tuple[str, Optional[bool], str]] = []
    if not metrics.frames:
        return [("nonempty", None, "no frames")]
    frame = cache_cfg.frame_tokens
    tokens = metrics.column("cache_tokens")
    bound = max(cache_cfg.budget, 2 * frame)
    results.append(("budget", bool(tokens.max() <= bound), f"peak {int(tokens.max())} <= {bound}"))

    ingested = len(metrics.frames) * frame
    ratio = metrics.aggregate["memory_ratio"]
    if cache_cfg.quantization_enabled and ingested >= 4 * cache_cfg.budget:
        results.append(("memory_trend", bool(ratio < 0.25), f"ratio {ratio:.4f} < 0.25"))
    else:
        results.append(("memory_trend", None, "needs quantization and >= 4x budget ingested"))

    agg = metrics.aggregate
    if agg["saturation_frame"] is not None and agg["latency_fit_frames"] >= 10:
        r = agg["latency_slope_ratio"]
        results.append(("latency_flat", bool(r <= 0.05), f"slope/mean {r:.4f} <= 0.05"))
    else:
        results.append(("latency_flat", None, "cache never saturated"))

    if metrics.oracle:
        finite = bool(np.isfinite(metrics.column(ERROR_COLUMN)).all())
        results.append(("finite_error", finite, f"max error {agg['max_error']:.3e}"))
    return results


def strip_wall_time(obj):
    """Drop timing fields so two runs of one config can be compared exactly."""
    if isinstance(obj, dict):
        return {k: strip_wall_time(v) for k, v in obj.items() if k not in WALL_TIME_FIELDS}
    if isinstance(obj, list):
        return [strip_wall_time(v) for v in obj]
    return obj


def _columns(metrics: StreamMetrics) -> tuple[str, ...]:
    return FRAME_COLUMNS + ((ERROR_COLUMN,) if metrics.oracle else ())


def render(metrics: StreamMetrics, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=_columns(metrics), lineterminator="\n")
        writer.writeheader()
        writer.writerows(metrics.frames)
        for key in sorted(metrics.aggregate):
            buf.write(f"# {key}={metrics.aggregate[key]}\n")
        return buf.getvalue()
    raise ValueError(f"unknown format {fmt!r}")


def emit(metrics: StreamMetrics, fmt: str, path) -> None:
    """Write metrics as ``json`` or ``csv``; ``path='-'`` writes to stdout."""
    text = render(metrics, fmt)
    if str(path) == "-":
        sys.stdout.write(text)
        return
    Path(path).write_text(text)
