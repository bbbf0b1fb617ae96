"""Query-guided importance scoring and budgeted top-k retention of cached tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensors import CacheSegments, FrameLayout, HeadTensor, ShapeError, split_special_normal


@dataclass(frozen=True)
class PooledQuery:
    """Head-averaged queries: special tokens as-is, then one row per patch-token group."""

    data: np.ndarray  # [n_pooled, channels]

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ImportanceScores:
    scores: np.ndarray  # aligned with middle-segment token order

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class KeepSet:
    indices: np.ndarray  # strictly increasing indices into the pre-prune cache

    def __len__(self) -> int:
        return self.indices.shape[0]


def pooled_count(layout: FrameLayout, pool_size: int) -> int:
    return layout.special_count() + -(-layout.patch_tokens // pool_size)


def pool_queries(q: HeadTensor, layout: FrameLayout, pool_size: int = 16) -> PooledQuery:
    """Average patch-token queries in consecutive groups of ``pool_size``, then over heads.

    A short trailing group is averaged over its actual size.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    special, normal = split_special_normal(q, layout)
    data = normal.data.astype(np.float64)
    starts = np.arange(0, normal.tokens, pool_size)
    sizes = np.minimum(pool_size, normal.tokens - starts)
    grouped = np.add.reduceat(data, starts, axis=1) / sizes[None, :, None]
    pooled = np.concatenate([special.data.astype(np.float64), grouped], axis=1)
    return PooledQuery(pooled.mean(axis=0))


def key_summary(k_cache: HeadTensor, seg: CacheSegments) -> np.ndarray:
    """Head-mean of the middle-segment keys, ``[middle_len, channels]``.

    ``k_cache`` may omit the current-frame span (the incoming frame is not cached yet).
    """
    if k_cache.tokens not in (seg.total, seg.first_len + seg.middle_len):
        raise ShapeError(f"key cache has {k_cache.tokens} tokens, segments describe {seg.total}")
    middle = k_cache.data[:, seg.middle_start:seg.middle_stop, :].astype(np.float64)
    return middle.mean(axis=0)


def importance_scores(pq: PooledQuery, summary: np.ndarray) -> ImportanceScores:
    """Raw inner products of pooled queries with summarised keys, averaged over the queries."""
    summary = np.asarray(summary, dtype=np.float64)
    if summary.ndim != 2 or summary.shape[1] != pq.channels:
        raise ShapeError(f"key summary {summary.shape} does not match {pq.channels} query channels")
    matrix = pq.data @ summary.T
    return ImportanceScores(matrix.mean(axis=0))


def select_keep_indices(s: ImportanceScores, seg: CacheSegments, budget: float) -> KeepSet:
    """Protected first/current spans plus the top ``k`` middle tokens.

    ``k = max(0, budget - first_len - current_len)``. Equal scores prefer the more
    recent (larger index) token. Nothing is dropped while the total fits the budget.
    """
    if len(s) != seg.middle_len:
        raise ShapeError(f"{len(s)} scores for a middle segment of {seg.middle_len} tokens")
    total = seg.total
    if total <= budget:
        return KeepSet(np.arange(total, dtype=np.int64))
    k = max(0, budget - seg.first_len - seg.current_len)
    take = int(min(k, seg.middle_len))
    local = np.arange(seg.middle_len)
    # lexsort keys: last is primary -> score desc, then index desc
    order = np.lexsort((-local, -s.scores))
    middle = np.sort(order[:take]) + seg.first_len
    keep = np.concatenate([
        np.arange(seg.first_len),
        middle,
        np.arange(total - seg.current_len, total),
    ]).astype(np.int64)
    return KeepSet(keep)

