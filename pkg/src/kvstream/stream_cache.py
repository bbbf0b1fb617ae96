"""Bounded streaming KV cache: score -> prune -> attend -> append -> quantize, once per frame.

Storage is a list of blocks. Block 0 is the first frame, quantized once and never
touched again. Every later frame is appended as its own block; when a pruning
event happens, the surviving middle tokens collapse into a single block whose Keys
are re-quantized (per-channel groups span tokens, so a gather breaks them) while the
per-token Value codes are gathered as-is.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .attention import attend
from .pruner import importance_scores, key_summary, pool_queries, select_keep_indices
from .quantizer import (
    Axis,
    QuantizedTensor,
    SUPPORTED_BITS,
    concat_per_token,
    dequantize_tensor,
    packed_nbytes,
    quantize_key_per_channel,
    quantize_value_per_token,
    take_tokens,
)
from .tensors import CacheSegments, FrameLayout, HeadTensor, ShapeError, concat_tokens

Store = Union[QuantizedTensor, HeadTensor]


class ConfigError(ValueError):
    """Invalid cache or workload configuration."""


class SnapshotError(ValueError):
    """Snapshot bytes are malformed, truncated, or from an unknown version."""


class CacheCorruptedError(RuntimeError):
    """A cache invariant failed after a step; the cache must not be used further."""


@dataclass(frozen=True)
class CacheConfig:
    heads: int
    head_dim: int
    layout: FrameLayout
    budget: float = 2048  # math.inf disables pruning
    pool_size: int = 16
    bits: int = 4
    group_size: int = 64
    quantization_enabled: bool = True

    def __post_init__(self) -> None:
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError("heads and head_dim must be positive")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        if self.bits not in SUPPORTED_BITS:
            raise ConfigError(f"bits must be one of {SUPPORTED_BITS}")
        if not (math.isinf(self.budget) or float(self.budget).is_integer()):
            raise ConfigError("budget must be a whole number of tokens or inf")
        if self.budget < self.layout.total():
            raise ConfigError(
                f"budget {self.budget} cannot hold one frame of {self.layout.total()} tokens"
            )

    @property
    def frame_tokens(self) -> int:
        return self.layout.total()


@dataclass
class _Block:
    k: Store
    v: Store
    requant: np.ndarray = field(default=None)  # per-token count of Key re-quantization passes

    def __post_init__(self) -> None:
        if self.requant is None:
            self.requant = np.zeros(self.tokens, dtype=np.uint32)

    @property
    def tokens(self) -> int:
        return self.k.tokens


class StreamingKVCache:
    """Per-layer compressed cache. Single writer: serialize ``step`` and ``snapshot``."""

    def __init__(self, cfg: CacheConfig) -> None:
        self.cfg = cfg
        self.t = 0
        self.ingested_tokens = 0
        self._blocks: list[_Block] = []

    # storage helpers

    def _encode(self, k: HeadTensor, v: HeadTensor, requant=None) -> _Block:
        cfg = self.cfg
        if not cfg.quantization_enabled:
            return _Block(k.astype(np.float32), v.astype(np.float32), requant)
        return _Block(
            quantize_key_per_channel(k, cfg.bits, cfg.group_size),
            quantize_value_per_token(v, cfg.bits, cfg.group_size),
            requant,
        )

    @staticmethod
    def _decode(store: Store) -> HeadTensor:
        return store if isinstance(store, HeadTensor) else dequantize_tensor(store)

    def _decode_blocks(self, blocks: list[_Block]) -> tuple[HeadTensor, HeadTensor]:
        ks = [self._decode(b.k) for b in blocks]
        vs = [self._decode(b.v) for b in blocks]
        return concat_tokens(*ks), concat_tokens(*vs)

    # introspection

    @property
    def first_frame_len(self) -> int:
        return self._blocks[0].tokens if self._blocks else 0

    @property
    def segments(self) -> CacheSegments:
        """Stored spans: first frame, middle, and the most recently appended frame."""
        if not self._blocks:
            return CacheSegments(0, 0, 0)
        if len(self._blocks) == 1:
            return CacheSegments(self._blocks[0].tokens, 0, 0)
        middle = sum(b.tokens for b in self._blocks[1:-1])
        return CacheSegments(self._blocks[0].tokens, middle, self._blocks[-1].tokens)

    def cache_len(self) -> int:
        return sum(b.tokens for b in self._blocks)

    def requant_passes(self) -> np.ndarray:
        """Key re-quantization passes for every retained token, in cache order."""
        if not self._blocks:
            return np.zeros(0, dtype=np.uint32)
        return np.concatenate([b.requant for b in self._blocks])

    def keys(self) -> HeadTensor:
        """Dequantized Keys currently retained."""
        return self._decode_blocks(self._blocks)[0]

    def values(self) -> HeadTensor:
        return self._decode_blocks(self._blocks)[1]

    def memory_bytes(self) -> tuple[int, int]:
        """``(compressed_bytes, fp16_equivalent_bytes)``.

        Compressed counts packed codes plus 8 bytes per group (4 bytes per element when
        quantization is off); the fp16 baseline is an unpruned cache of every token ingested.
        """
        cfg = self.cfg
        compressed = 0
        for b in self._blocks:
            for store in (b.k, b.v):
                if isinstance(store, HeadTensor):
                    compressed += 4 * store.data.size
                else:
                    compressed += store.nbytes
        fp16 = 2 * self.ingested_tokens * cfg.heads * cfg.head_dim * 2
        return compressed, fp16

    # the per-frame loop

    def _check_frame(self, q: HeadTensor, k: HeadTensor, v: HeadTensor) -> None:
        cfg = self.cfg
        expected = (cfg.heads, cfg.frame_tokens, cfg.head_dim)
        for name, x in (("q", q), ("k", k), ("v", v)):
            if x.shape != expected:
                raise ShapeError(f"{name} has shape {x.shape}, cache expects {expected}")

    def step(self, q: HeadTensor, k: HeadTensor, v: HeadTensor) -> HeadTensor:
        self._check_frame(q, k, v)
        cfg = self.cfg
        fresh = cfg.frame_tokens
        q, k, v = (x.astype(np.float32) for x in (q, k, v))

        if self.t == 0:
            out = attend(q, k, v)
            self._blocks = [self._encode(k, v)]
        else:
            k_cache, v_cache = self._decode_blocks(self._blocks)
            first_len = self.first_frame_len
            middle_len = k_cache.tokens - first_len
            if k_cache.tokens + fresh > cfg.budget:
                seg = CacheSegments(first_len, middle_len, fresh)
                scores = importance_scores(pool_queries(q, cfg.layout, cfg.pool_size), key_summary(k_cache, seg))
                keep = select_keep_indices(scores, seg, cfg.budget).indices
                cached = keep[keep < k_cache.tokens]
                k_cache, v_cache = k_cache.take_tokens(cached), v_cache.take_tokens(cached)
                self._prune_storage(cached[first_len:] - first_len, k_cache.slice_tokens(first_len, k_cache.tokens))
            out = attend(q, concat_tokens(k_cache, k), concat_tokens(v_cache, v))
            self._blocks.append(self._encode(k, v))

        self.t += 1
        self.ingested_tokens += fresh
        self._check_invariants()
        return out

    def _prune_storage(self, middle_keep: np.ndarray, k_middle: HeadTensor) -> None:
        """Collapse middle blocks into one holding only ``middle_keep`` (middle-local indices)."""
        middle = self._blocks[1:]
        if middle_keep.size == 0 or not middle:
            self._blocks = self._blocks[:1]
            return
        requant = np.concatenate([b.requant for b in middle])[middle_keep]
        if self.cfg.quantization_enabled:
            k_store = quantize_key_per_channel(k_middle, self.cfg.bits, self.cfg.group_size)
            v_store = take_tokens(concat_per_token([b.v for b in middle]), middle_keep)
            requant = requant + 1
        else:
            k_store = k_middle
            v_store = concat_tokens(*[b.v for b in middle]).take_tokens(middle_keep)
        self._blocks = [self._blocks[0], _Block(k_store, v_store, requant.astype(np.uint32))]

    def _check_invariants(self) -> None:
        n = self.cache_len()
        bound = max(self.cfg.budget, self.first_frame_len + self.cfg.frame_tokens)
        if n > bound:
            raise CacheCorruptedError(f"cache holds {n} tokens, bound is {bound}")
        if self._blocks[-1].tokens != self.cfg.frame_tokens:
            raise CacheCorruptedError("most recent frame is not the tail of the cache")

    # persistence

    def snapshot(self) -> bytes:
        return _dump(self)

    @classmethod
    def restore(cls, data: bytes) -> StreamingKVCache:
        return _load(data)


def new_cache(cfg: CacheConfig) -> StreamingKVCache:
    return StreamingKVCache(cfg)


# Snapshot layout (little-endian):
#   "XKVC" | u16 version | header | u32 n_blocks | blocks... | u32 crc32(all preceding bytes)
# block: u32 tokens | u32[tokens] requant | key store | value store
# store (quantized): u8 axis | u32 tokens | u32 n_codes_bytes | codes | u32 grid dims x3 |
#                    f32 scale[] | i64 zero_point[] | f32 minimum[]
# store (float):     u8 0xFF | u32 tokens | f32 data[H*tokens*d]

MAGIC = b"XKVC"
VERSION = 1
UNBOUNDED = 0xFFFFFFFFFFFFFFFF
_PREAMBLE = struct.Struct("<4sH")
_HEADER = struct.Struct("<IIBBIQIIIQQQQQ")
_AXIS_CODE = {Axis.PER_CHANNEL: 0, Axis.PER_TOKEN: 1}
_CODE_AXIS = {v: k for k, v in _AXIS_CODE.items()}
_FLOAT_STORE = 0xFF


def _dump(cache: StreamingKVCache) -> bytes:
    cfg = cache.cfg
    seg = cache.segments
    budget = UNBOUNDED if math.isinf(cfg.budget) else int(cfg.budget)
    parts = [
        _PREAMBLE.pack(MAGIC, VERSION),
        _HEADER.pack(cfg.heads, cfg.head_dim, cfg.bits, int(cfg.quantization_enabled), cfg.group_size,
                     budget, cfg.pool_size, cfg.layout.register_tokens, cfg.layout.patch_tokens,
                     cache.t, cache.ingested_tokens, seg.first_len, seg.middle_len, seg.current_len),
        struct.pack("<I", len(cache._blocks)),
    ]
    for b in cache._blocks:
        parts.append(struct.pack("<I", b.tokens))
        parts.append(b.requant.astype("<u4").tobytes())
        for store in (b.k, b.v):
            parts.append(_dump_store(store))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _dump_store(store: Store) -> bytes:
    if isinstance(store, HeadTensor):
        return struct.pack("<BI", _FLOAT_STORE, store.tokens) + store.data.astype("<f4").tobytes()
    return b"".join([
        struct.pack("<BII", _AXIS_CODE[store.axis], store.tokens, store.codes.size),
        store.codes.tobytes(),
        struct.pack("<III", *store.scale.shape),
        store.scale.astype("<f4").tobytes(),
        store.zero_point.astype("<i8").tobytes(),
        store.minimum.astype("<f4").tobytes(),
    ])


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise SnapshotError("snapshot is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct | str):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dt.newbyteorder("="))


def _load(data: bytes) -> StreamingKVCache:
    data = bytes(data)
    if len(data) < _PREAMBLE.size + 4:
        raise SnapshotError("snapshot is truncated")
    magic, version = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise SnapshotError("not a KV cache snapshot (bad magic)")
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise SnapshotError("snapshot checksum mismatch")

    r = _Reader(body)
    r.take(_PREAMBLE.size)
    (heads, head_dim, bits, quant, group_size, budget, pool_size, registers, patches,
     t, ingested, first_len, middle_len, current_len) = r.unpack(_HEADER)
    try:
        cfg = CacheConfig(
            heads=heads, head_dim=head_dim,
            layout=FrameLayout(register_tokens=registers, patch_tokens=patches),
            budget=math.inf if budget == UNBOUNDED else budget,
            pool_size=pool_size, bits=bits, group_size=group_size, quantization_enabled=bool(quant),
        )
    except ValueError as exc:
        raise SnapshotError(f"snapshot header holds an invalid config: {exc}") from exc
    cache = StreamingKVCache(cfg)
    cache.t, cache.ingested_tokens = t, ingested
    (n_blocks,) = r.unpack("<I")
    for _ in range(n_blocks):
        (tokens,) = r.unpack("<I")
        requant = r.array("<u4", tokens).astype(np.uint32)
        k = _load_store(r, cfg)
        v = _load_store(r, cfg)
        if k.tokens != tokens or v.tokens != tokens:
            raise SnapshotError("block token counts disagree")
        cache._blocks.append(_Block(k, v, requant))
    if r.pos != len(body):
        raise SnapshotError("trailing bytes after the last block")
    if cache.segments != CacheSegments(first_len, middle_len, current_len):
        raise SnapshotError("segment lengths in header do not match stored blocks")
    return cache


def _load_store(r: _Reader, cfg: CacheConfig) -> Store:
    kind, tokens = r.unpack("<BI")
    if kind == _FLOAT_STORE:
        values = r.array("<f4", cfg.heads * tokens * cfg.head_dim)
        return HeadTensor(values.reshape(cfg.heads, tokens, cfg.head_dim))
    if kind not in _CODE_AXIS:
        raise SnapshotError(f"unknown store kind {kind}")
    (n_codes,) = r.unpack("<I")
    if n_codes != packed_nbytes(cfg.heads * tokens * cfg.head_dim, cfg.bits):
        raise SnapshotError("packed code length does not match the tensor shape")
    codes = r.array("u1", n_codes)
    grid = r.unpack("<III")
    n = int(np.prod(grid))
    scale = r.array("<f4", n).reshape(grid)
    zero = r.array("<i8", n).reshape(grid)
    minimum = r.array("<f4", n).reshape(grid)
    return QuantizedTensor(cfg.heads, tokens, cfg.head_dim, cfg.bits, cfg.group_size, _CODE_AXIS[kind],
                           codes, scale, zero, minimum)
