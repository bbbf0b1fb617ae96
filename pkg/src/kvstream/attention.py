"""Scaled dot-product temporal attention and the full-cache float64 reference stream."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import softmax

from .tensors import HeadTensor, ShapeError


def attend(q: HeadTensor, k: HeadTensor, v: HeadTensor) -> HeadTensor:
    """``softmax(q k^T / sqrt(d)) v`` per head, in the queries' working precision.

    No mask is applied: frame-wise causality comes from what the cache holds.
    """
    if k.tokens != v.tokens:
        raise ShapeError(f"{k.tokens} keys but {v.tokens} values")
    if k.tokens < 1:
        raise ShapeError("attention needs at least one key")
    if not (q.heads == k.heads == v.heads) or q.channels != k.channels:
        raise ShapeError(f"incompatible shapes q={q.shape} k={k.shape} v={v.shape}")
    dtype = np.result_type(q.data.dtype, np.float32)
    qd, kd, vd = (t.data.astype(dtype, copy=False) for t in (q, k, v))
    logits = np.matmul(qd, kd.transpose(0, 2, 1))
    logits *= dtype.type(1.0 / np.sqrt(q.channels))
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    return HeadTensor(np.matmul(logits, vd))


class ReferenceStream:
    """Uncompressed float64 cache: frame ``t`` attends over every K/V of frames ``1..t``."""

    def __init__(self) -> None:
        self._keys: np.ndarray | None = None
        self._values: np.ndarray | None = None
        self._len = 0
        self._frame_shape: tuple[int, int, int] | None = None

    @property
    def tokens(self) -> int:
        return self._len

    def _append(self, k: np.ndarray, v: np.ndarray) -> None:
        n = k.shape[1]
        if self._keys is None:
            self._keys = np.empty((k.shape[0], max(n, 1) * 8, k.shape[2]))
            self._values = np.empty_like(self._keys)
        if self._len + n > self._keys.shape[1]:
            grow = max(self._keys.shape[1] * 2, self._len + n)
            for name in ("_keys", "_values"):
                old = getattr(self, name)
                buf = np.empty((old.shape[0], grow, old.shape[2]))
                buf[:, :self._len] = old[:, :self._len]
                setattr(self, name, buf)
        self._keys[:, self._len:self._len + n] = k
        self._values[:, self._len:self._len + n] = v
        self._len += n

    def step(self, q: HeadTensor, k: HeadTensor, v: HeadTensor) -> HeadTensor:
        if not (q.shape == k.shape == v.shape):
            raise ShapeError(f"frame tensors disagree: q={q.shape} k={k.shape} v={v.shape}")
        if self._frame_shape is None:
            self._frame_shape = q.shape
        elif q.shape != self._frame_shape:
            raise ShapeError(f"frame shape drifted from {self._frame_shape} to {q.shape}")
        self._append(k.data.astype(np.float64), v.data.astype(np.float64))
        keys = self._keys[:, :self._len]
        values = self._values[:, :self._len]
        logits = np.matmul(q.data.astype(np.float64), keys.transpose(0, 2, 1)) / np.sqrt(q.channels)
        weights = softmax(logits, axis=-1)
        return HeadTensor(np.matmul(weights, values))


def reference_stream(frames: Iterable[Sequence[HeadTensor]]) -> list[HeadTensor]:
    ref = ReferenceStream()
    return [ref.step(q, k, v) for q, k, v in frames]


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_golden(directory, outputs: Sequence[HeadTensor], *, seed: int, config: dict) -> Path:
    """Write per-frame float64 little-endian arrays plus a ``golden.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shape = list(outputs[0].shape) if outputs else []
    for i, out in enumerate(outputs):
        if list(out.shape) != shape:
            raise ShapeError("golden outputs must share one shape")
        (directory / f"frame_{i:05d}.f64").write_bytes(out.data.astype("<f8").tobytes())
    sidecar = {
        "frames": len(outputs),
        "shape": shape,
        "dtype": "<f8",
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
    }
    path = directory / "golden.json"
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_golden(directory) -> tuple[list[HeadTensor], dict]:
    directory = Path(directory)
    meta = json.loads((directory / "golden.json").read_text())
    if meta["config_hash"] != config_hash(meta["config"]):
        raise ValueError("golden sidecar config hash mismatch")
    shape = tuple(meta["shape"])
    outputs = []
    for i in range(meta["frames"]):
        raw = np.frombuffer((directory / f"frame_{i:05d}.f64").read_bytes(), dtype="<f8")
        if raw.size != int(np.prod(shape)):
            raise ShapeError(f"golden frame {i} has {raw.size} values, expected shape {shape}")
        outputs.append(HeadTensor(raw.reshape(shape).astype(np.float64)))
    return outputs, meta
