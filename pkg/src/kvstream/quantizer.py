"""Asymmetric uniform quantization with grouped per-channel (Key) and per-token (Value) granularity.

Codes are ``clamp(round(x / s) + z, 0, 2**b - 1)`` with ``s = (max - min) / (2**b - 1)``
and ``z = round(-min / s)``; rounding is half away from zero throughout. A group whose
range is zero stores ``s = 0`` and its minimum, and reconstructs exactly.

Stored scales are float32, rounded *up* from the exact ratio so that every in-range
element stays within ``s / 2`` of its reconstruction. Zero-points are wide signed
integers: they may fall outside the code range when a group is single-signed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensors import HeadTensor, ShapeError

SUPPORTED_BITS = (2, 4, 8)
METADATA_BYTES_PER_GROUP = 8  # 32-bit scale + 32-bit zero-point


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    fl = np.floor(a)
    r = np.where(a - fl >= 0.5, fl + 1.0, fl)
    return np.copysign(r, x)


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")


def _params_from_range(mn: np.ndarray, mx: np.ndarray, bits: int):
    """Vectorised scale, zero-point and degenerate-minimum for groups with the given ranges."""
    levels = (1 << bits) - 1
    mn = np.asarray(mn, dtype=np.float64)
    mx = np.asarray(mx, dtype=np.float64)
    span = mx - mn
    degenerate = span == 0
    exact = span / levels
    scale = exact.astype(np.float32)
    low = scale.astype(np.float64) < exact
    scale[low] = np.nextafter(scale[low], np.float32(np.inf))
    safe_span = np.where(degenerate, 1.0, span)
    zero = round_half_away(-mn * levels / safe_span).astype(np.int64)
    zero[degenerate] = 0
    scale[degenerate] = 0.0
    minimum = np.where(degenerate, mn, 0.0).astype(np.float32)
    return scale, zero, minimum


def _codes(x: np.ndarray, scale: np.ndarray, zero: np.ndarray, bits: int) -> np.ndarray:
    levels = (1 << bits) - 1
    s = scale.astype(np.float64)
    degenerate = s == 0
    q = round_half_away(np.asarray(x, dtype=np.float64) / np.where(degenerate, 1.0, s)) + zero
    q = np.clip(q, 0, levels)
    return np.where(degenerate, 0, q).astype(np.uint8)


def _values(codes: np.ndarray, scale: np.ndarray, zero: np.ndarray, minimum: np.ndarray) -> np.ndarray:
    s = scale.astype(np.float64)
    out = (codes.astype(np.int64) - zero).astype(np.float64) * s
    return np.where(s == 0, minimum.astype(np.float64), out)


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero-point and bit-width of one quantization group."""

    scale: float
    zero_point: int
    bits: int
    degenerate_min: Optional[float] = None

    def __post_init__(self) -> None:
        _check_bits(self.bits)
        if self.degenerate_min is None and not self.scale > 0:
            raise ValueError("non-degenerate params need a positive scale")
        if self.degenerate_min is not None and self.scale != 0:
            raise ValueError("degenerate params carry scale 0")

    @property
    def degenerate(self) -> bool:
        return self.degenerate_min is not None


def quant_params(values, bits: int = 4) -> QuantParams:
    values = np.asarray(values, dtype=np.float64).ravel()
    _check_bits(bits)
    if values.size == 0:
        raise ValueError("cannot derive quantization params from an empty group")
    if not np.isfinite(values).all():
        raise ValueError("quantization input must be finite")
    scale, zero, minimum = _params_from_range(values.min(keepdims=True), values.max(keepdims=True), bits)
    if scale[0] == 0:
        return QuantParams(0.0, 0, bits, degenerate_min=float(minimum[0]))
    return QuantParams(float(scale[0]), int(zero[0]), bits)


def quantize(x, p: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if p.degenerate:
        return np.zeros(x.shape, dtype=np.uint8)
    return _codes(x, np.float64(p.scale), np.int64(p.zero_point), p.bits)


def dequantize(codes, p: QuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    if p.degenerate:
        return np.full(codes.shape, p.degenerate_min, dtype=np.float64)
    return (codes.astype(np.int64) - p.zero_point).astype(np.float64) * p.scale


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack codes ``8 // bits`` per byte; the earlier element occupies the lower bits."""
    _check_bits(bits)
    flat = np.asarray(codes, dtype=np.uint8).ravel()
    per_byte = 8 // bits
    if per_byte == 1:
        return flat.copy()
    pad = (-flat.size) % per_byte
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, dtype=np.uint8)])
    lanes = flat.reshape(-1, per_byte)
    out = np.zeros(lanes.shape[0], dtype=np.uint8)
    for i in range(per_byte):
        out |= lanes[:, i] << np.uint8(i * bits)
    return out


def unpack_codes(packed: np.ndarray, bits: int, count: int) -> np.ndarray:
    _check_bits(bits)
    packed = np.asarray(packed, dtype=np.uint8)
    per_byte = 8 // bits
    if per_byte == 1:
        return packed[:count].copy()
    mask = np.uint8((1 << bits) - 1)
    lanes = np.stack([(packed >> np.uint8(i * bits)) & mask for i in range(per_byte)], axis=1)
    return lanes.ravel()[:count]


def packed_nbytes(count: int, bits: int) -> int:
    return math.ceil(count * bits / 8)


def group_count(heads: int, tokens: int, channels: int, group_size: int, axis: "Axis") -> int:
    if axis is Axis.PER_CHANNEL:
        return heads * channels * -(-tokens // group_size)
    return heads * tokens * -(-channels // group_size)


def store_nbytes(heads: int, tokens: int, channels: int, bits: int, group_size: int, axis: "Axis") -> int:
    """Closed-form bytes of a quantized tensor: packed codes plus group metadata."""
    return (packed_nbytes(heads * tokens * channels, bits)
            + METADATA_BYTES_PER_GROUP * group_count(heads, tokens, channels, group_size, axis))


class Axis(enum.Enum):
    PER_CHANNEL = "per_channel"  # groups run along tokens inside one channel
    PER_TOKEN = "per_token"  # groups run along channels inside one token


@dataclass(frozen=True)
class QuantizedTensor:
    """Packed codes plus per-group params for an ``[heads, tokens, channels]`` tensor.

    Param arrays live on a group grid: ``[heads, channels, n_groups]`` for
    per-channel grouping and ``[heads, tokens, n_groups]`` for per-token grouping.
    ``minimum`` is only meaningful where ``scale == 0``.
    """

    heads: int
    tokens: int
    channels: int
    bits: int
    group_size: int
    axis: Axis
    codes: np.ndarray
    scale: np.ndarray
    zero_point: np.ndarray
    minimum: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.heads, self.tokens, self.channels)

    @property
    def n_groups(self) -> int:
        return int(self.scale.size)

    @property
    def nbytes(self) -> int:
        return packed_nbytes(self.heads * self.tokens * self.channels, self.bits) + METADATA_BYTES_PER_GROUP * self.n_groups

    def unpacked(self) -> np.ndarray:
        n = self.heads * self.tokens * self.channels
        return unpack_codes(self.codes, self.bits, n).reshape(self.shape)

    def params(self, head: int, fixed: int, group: int) -> QuantParams:
        """Params of one group; ``fixed`` is the channel (per-channel) or token (per-token)."""
        s = float(self.scale[head, fixed, group])
        if s == 0:
            return QuantParams(0.0, 0, self.bits, degenerate_min=float(self.minimum[head, fixed, group]))
        return QuantParams(s, int(self.zero_point[head, fixed, group]), self.bits)


def _group_last_axis(x: np.ndarray, bits: int, group_size: int):
    """Quantize in consecutive groups along the last axis; a short trailing group gets its own params."""
    length = x.shape[-1]
    n_groups = -(-length // group_size)
    pad = n_groups * group_size - length
    # edge padding duplicates the last element, which leaves the trailing group's min/max alone
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, pad)], mode="edge") if pad else x
    grouped = padded.reshape(*x.shape[:-1], n_groups, group_size)
    scale, zero, minimum = _params_from_range(grouped.min(axis=-1), grouped.max(axis=-1), bits)
    codes = _codes(grouped, scale[..., None], zero[..., None], bits)
    codes = codes.reshape(*x.shape[:-1], n_groups * group_size)[..., :length]
    return codes, scale, zero, minimum


def _expand(params: np.ndarray, group_size: int, length: int) -> np.ndarray:
    return np.repeat(params, group_size, axis=-1)[..., :length]


def _quantize_tensor(x: HeadTensor, bits: int, group_size: int, axis: Axis) -> QuantizedTensor:
    _check_bits(bits)
    if group_size < 1:
        raise ValueError("group_size must be positive")
    data = x.data
    if data.shape[1] == 0:
        grid = (x.heads, x.channels, 0) if axis is Axis.PER_CHANNEL else (x.heads, 0, 0)
        return QuantizedTensor(x.heads, 0, x.channels, bits, group_size, axis, np.zeros(0, np.uint8),
                               np.zeros(grid, np.float32), np.zeros(grid, np.int64), np.zeros(grid, np.float32))
    if axis is Axis.PER_CHANNEL:
        codes, scale, zero, minimum = _group_last_axis(data.transpose(0, 2, 1), bits, group_size)
        codes = codes.transpose(0, 2, 1)
    else:
        codes, scale, zero, minimum = _group_last_axis(data, bits, group_size)
    return QuantizedTensor(x.heads, x.tokens, x.channels, bits, group_size, axis,
                           pack_codes(codes, bits), scale, zero, minimum)


def quantize_key_per_channel(k: HeadTensor, bits: int = 4, group_size: int = 64) -> QuantizedTensor:
    return _quantize_tensor(k, bits, group_size, Axis.PER_CHANNEL)


def quantize_value_per_token(v: HeadTensor, bits: int = 4, group_size: int = 64) -> QuantizedTensor:
    return _quantize_tensor(v, bits, group_size, Axis.PER_TOKEN)


def dequantize_tensor(q: QuantizedTensor, dtype=np.float32) -> HeadTensor:
    if q.tokens == 0:
        return HeadTensor(np.zeros(q.shape, dtype=dtype))
    codes = q.unpacked()
    if q.axis is Axis.PER_CHANNEL:
        # grid [H, d, n] -> per-element [H, d, T] -> [H, T, d]
        args = [_expand(a, q.group_size, q.tokens) for a in (q.scale, q.zero_point, q.minimum)]
        values = _values(codes.transpose(0, 2, 1), *args).transpose(0, 2, 1)
    else:
        args = [_expand(a, q.group_size, q.channels) for a in (q.scale, q.zero_point, q.minimum)]
        values = _values(codes, *args)
    return HeadTensor(values.astype(dtype))


def take_tokens(q: QuantizedTensor, indices) -> QuantizedTensor:
    """Gather tokens of a per-token tensor without touching its codes' values."""
    if q.axis is not Axis.PER_TOKEN:
        raise ValueError("only per-token grouping survives a token gather unchanged")
    idx = np.asarray(indices, dtype=np.intp)
    codes = q.unpacked()[:, idx, :]
    return QuantizedTensor(q.heads, idx.size, q.channels, q.bits, q.group_size, q.axis,
                           pack_codes(codes, q.bits), q.scale[:, idx], q.zero_point[:, idx], q.minimum[:, idx])


def concat_per_token(parts: list[QuantizedTensor]) -> QuantizedTensor:
    """Concatenate per-token tensors along the token axis (their groups are token-local)."""
    if not parts:
        raise ShapeError("nothing to concatenate")
    first = parts[0]
    for p in parts:
        if p.axis is not Axis.PER_TOKEN:
            raise ValueError("only per-token tensors concatenate in the code domain")
        if (p.heads, p.channels, p.bits, p.group_size) != (first.heads, first.channels, first.bits, first.group_size):
            raise ShapeError("mismatched per-token tensors")
    if len(parts) == 1:
        return first
    codes = np.concatenate([p.unpacked() for p in parts], axis=1)
    return QuantizedTensor(first.heads, codes.shape[1], first.channels, first.bits, first.group_size, first.axis,
                           pack_codes(codes, first.bits),
                           np.concatenate([p.scale for p in parts], axis=1),
                           np.concatenate([p.zero_point for p in parts], axis=1),
                           np.concatenate([p.minimum for p in parts], axis=1))
