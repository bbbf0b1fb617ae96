"""Seeded synthetic Q/K/V streams with channel-wise Key outliers and AR(1) temporal correlation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from ..tensors import FrameLayout, HeadTensor


@dataclass(frozen=True)
class WorkloadConfig:
    frames: int = 200
    layout: FrameLayout = field(default_factory=lambda: FrameLayout(register_tokens=4, patch_tokens=59))
    heads: int = 8
    head_dim: int = 64
    seed: int = 0
    outlier_channels: float = 1 / 16
    outlier_scale: float = 20.0
    temporal_correlation: float = 0.5

    def __post_init__(self) -> None:
        if self.frames < 0:
            raise ValueError("frames must be non-negative")
        if self.heads < 1 or self.head_dim < 1:
            raise ValueError("heads and head_dim must be positive")
        if not 0.0 <= self.outlier_channels <= 1.0:
            raise ValueError("outlier_channels is a fraction in [0, 1]")
        if not 0.0 <= self.temporal_correlation < 1.0:
            raise ValueError("temporal_correlation must lie in [0, 1)")

    @property
    def n_outlier_channels(self) -> int:
        return math.ceil(self.outlier_channels * self.head_dim)

    def to_dict(self) -> dict:
        return asdict(self)


def _draw_outliers(rng: np.random.Generator, cfg: WorkloadConfig) -> np.ndarray:
    return np.sort(rng.choice(cfg.head_dim, size=cfg.n_outlier_channels, replace=False))


def outlier_channel_set(cfg: WorkloadConfig) -> np.ndarray:
    """Key channels boosted by :func:`iter_workload` for this config."""
    return _draw_outliers(np.random.default_rng(cfg.seed), cfg)


def iter_workload(cfg: WorkloadConfig) -> Iterator[tuple[HeadTensor, HeadTensor, HeadTensor]]:
    """Yield ``(q, k, v)`` per frame; the same Key channels are boosted in every frame.

    Base noise follows ``x_t = rho * x_{t-1} + sqrt(1 - rho^2) * eps_t`` so every frame
    stays unit-variance.
    """
    rng = np.random.default_rng(cfg.seed)
    boosted = _draw_outliers(rng, cfg)
    gain = np.ones(cfg.head_dim)
    gain[boosted] = cfg.outlier_scale
    rho = cfg.temporal_correlation
    innovation = math.sqrt(1.0 - rho * rho)
    shape = (3, cfg.heads, cfg.layout.total(), cfg.head_dim)
    state = None
    for _ in range(cfg.frames):
        eps = rng.standard_normal(shape)
        state = eps if state is None else rho * state + innovation * eps
        q = state[0].astype(np.float32)
        k = (state[1] * gain).astype(np.float32)
        v = state[2].astype(np.float32)
        yield HeadTensor(q), HeadTensor(k), HeadTensor(v)


def gen_workload(cfg: WorkloadConfig) -> list[tuple[HeadTensor, HeadTensor, HeadTensor]]:
    return list(iter_workload(cfg))
