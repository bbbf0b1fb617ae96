import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvstream.attention import ReferenceStream, attend
from kvstream.quantizer import Axis, store_nbytes
from kvstream.stream_cache import (
    CacheConfig,
    CacheCorruptedError,
    ConfigError,
    SnapshotError,
    StreamingKVCache,
    new_cache,
)
from kvstream.tensors import FrameLayout, HeadTensor, ShapeError

from conftest import random_head_tensor, rel_l2

LAYOUT = FrameLayout(register_tokens=4, patch_tokens=27)  # 32 tokens per frame


def frames(seed, n, heads=2, tokens=32, dim=16):
    g = np.random.default_rng(seed)
    return [tuple(random_head_tensor(g, heads, tokens, dim) for _ in range(3)) for _ in range(n)]


def cfg(**kw):
    base = dict(heads=2, head_dim=16, layout=LAYOUT, budget=128, pool_size=4, bits=4, group_size=16)
    base.update(kw)
    return CacheConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = CacheConfig(heads=16, head_dim=64, layout=FrameLayout(4, 1031))
        assert (c.budget, c.pool_size, c.bits, c.group_size, c.quantization_enabled) == (2048, 16, 4, 64, True)
        cache = new_cache(c)
        assert cache.cache_len() == 0 and cache.t == 0

    @pytest.mark.parametrize("kw", [dict(budget=31), dict(pool_size=0), dict(group_size=0), dict(bits=3),
                                    dict(heads=0), dict(budget=100.5)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ConfigError):
            cfg(**kw)

    def test_no_quant_uses_float_store(self):
        cache = new_cache(cfg(quantization_enabled=False))
        cache.step(*frames(0, 1)[0])
        assert isinstance(cache._blocks[0].k, HeadTensor)


def test_first_frame_is_self_attention():
    (q, k, v), = frames(1, 1)
    cache = new_cache(cfg())
    out = cache.step(q, k, v)
    np.testing.assert_array_equal(out.data, attend(q, k, v).data)
    assert cache.cache_len() == 32


def test_lossless_stream_matches_oracle():
    cache = new_cache(cfg(budget=math.inf, quantization_enabled=False))
    ref = ReferenceStream()
    for q, k, v in frames(2, 8):
        assert rel_l2(cache.step(q, k, v).data, ref.step(q, k, v).data) <= 1e-5


def test_cache_len_saturates():
    layout = FrameLayout(4, 59)
    cache = new_cache(CacheConfig(heads=2, head_dim=16, layout=layout, budget=256))
    lengths = []
    for q, k, v in frames(3, 64, tokens=64):
        cache.step(q, k, v)
        lengths.append(cache.cache_len())
    assert max(lengths) == 256
    assert lengths[:4] == [64, 128, 192, 256]
    assert all(n == 256 for n in lengths[3:])


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    budget=st.sampled_from([32, 50, 64, 97, 128, 1000, math.inf]),
    quant=st.booleans(),
    bits=st.sampled_from([2, 4, 8]),
)
def test_step_invariants(seed, budget, quant, bits):
    cache = new_cache(cfg(budget=budget, quantization_enabled=quant, bits=bits))
    first_k = first_v = None
    for i, (q, k, v) in enumerate(frames(seed, 12)):
        cache.step(q, k, v)
        assert cache.cache_len() <= max(budget, 64)
        keys, values = cache.keys(), cache.values()
        if i == 0:
            first_k, first_v = keys.data.copy(), values.data.copy()
        # first frame is an index-stable prefix that pruning never touches
        assert keys.data[:, :32].tobytes() == first_k.tobytes()
        assert values.data[:, :32].tobytes() == first_v.tobytes()
        if not quant:
            np.testing.assert_array_equal(keys.data[:, -32:], k.data)
            np.testing.assert_array_equal(values.data[:, -32:], v.data)
    seg = cache.segments
    assert seg.total == cache.cache_len()
    assert seg.current_len == 32


def test_latest_frame_matches_fresh_quantization():
    from kvstream.quantizer import dequantize_tensor, quantize_key_per_channel

    cache = new_cache(cfg(budget=96))
    for q, k, v in frames(4, 6):
        cache.step(q, k, v)
    expected = dequantize_tensor(quantize_key_per_channel(k, 4, 16)).data
    np.testing.assert_array_equal(cache.keys().data[:, -32:], expected)


def test_pruning_keeps_high_scoring_middle_tokens():
    # a middle token aligned with every query must survive pruning
    c = cfg(budget=96, quantization_enabled=False, heads=1)
    g = np.random.default_rng(5)
    cache = new_cache(c)
    fr = [tuple(random_head_tensor(g, 1, 32, 16) for _ in range(3)) for _ in range(3)]
    direction = np.zeros(16, dtype=np.float32)
    direction[0] = 1.0
    k1 = fr[1][1].data.copy()
    k1[0, 7] = 50 * direction
    fr[1] = (fr[1][0], HeadTensor(k1), fr[1][2])
    q2 = fr[2][0].data.copy()
    q2[0, :, 0] = np.abs(q2[0, :, 0]) + 1.0
    fr[2] = (HeadTensor(q2), fr[2][1], fr[2][2])
    for f in fr:
        cache.step(*f)
    kept = cache.keys().data[0]
    assert cache.cache_len() == 96
    assert any(np.array_equal(row, k1[0, 7]) for row in kept[32:64])


def test_requant_passes_tracked():
    cache = new_cache(cfg(budget=96))
    for q, k, v in frames(6, 10):
        cache.step(q, k, v)
    passes = cache.requant_passes()
    assert passes.size == cache.cache_len()
    assert passes[:32].max() == 0 and passes[-32:].max() == 0
    assert passes[32:64].min() >= 1


def test_shape_mismatch_rejected(rng):
    cache = new_cache(cfg())
    with pytest.raises(ShapeError):
        cache.step(*(random_head_tensor(rng, 2, 31, 16) for _ in range(3)))


def test_invariant_violation_is_fatal(monkeypatch):
    cache = new_cache(cfg(budget=64))
    cache.step(*frames(7, 1)[0])
    monkeypatch.setattr(StreamingKVCache, "_prune_storage", lambda self, *a: None)
    cache.step(*frames(8, 1)[0])
    with pytest.raises(CacheCorruptedError):
        cache.step(*frames(9, 1)[0])


class TestMemory:
    def test_empty(self):
        assert new_cache(cfg()).memory_bytes() == (0, 0)

    def test_quantized_accounting_closed_form(self):
        cache = new_cache(cfg(budget=math.inf))
        for q, k, v in frames(10, 3):
            cache.step(q, k, v)
        per_frame = (store_nbytes(2, 32, 16, 4, 16, Axis.PER_CHANNEL)
                     + store_nbytes(2, 32, 16, 4, 16, Axis.PER_TOKEN))
        assert cache.memory_bytes() == (3 * per_frame, 2 * 96 * 2 * 16 * 2)

    def test_float_accounting(self):
        cache = new_cache(cfg(quantization_enabled=False))
        cache.step(*frames(11, 1)[0])
        assert cache.memory_bytes()[0] == 2 * 32 * 2 * 16 * 4

    def test_ratio_after_long_stream(self):
        cache = new_cache(cfg(budget=128))
        for q, k, v in frames(12, 8 * 4):
            cache.step(q, k, v)
        compressed, fp16 = cache.memory_bytes()
        assert compressed / fp16 < 0.25


class TestSnapshot:
    @pytest.mark.parametrize("quant", [True, False])
    @pytest.mark.parametrize("budget", [96, math.inf])
    def test_restore_continues_identically(self, quant, budget):
        stream = frames(13, 10)
        a = new_cache(cfg(budget=budget, quantization_enabled=quant))
        for f in stream[:6]:
            a.step(*f)
        blob = a.snapshot()
        b = StreamingKVCache.restore(blob)
        assert b.snapshot() == blob
        assert (b.t, b.cache_len(), b.segments, b.cfg) == (a.t, a.cache_len(), a.segments, a.cfg)
        for f in stream[6:]:
            assert a.step(*f).data.tobytes() == b.step(*f).data.tobytes()
        assert a.snapshot() == b.snapshot()

    def test_header_layout(self):
        a = new_cache(cfg())
        a.step(*frames(14, 1)[0])
        blob = a.snapshot()
        assert blob[:4] == b"XKVC"
        assert int.from_bytes(blob[4:6], "little") == 1

    def test_empty_cache_round_trips(self):
        blob = new_cache(cfg()).snapshot()
        assert StreamingKVCache.restore(blob).cache_len() == 0

    def test_rejects_corruption(self):
        a = new_cache(cfg())
        for f in frames(15, 3):
            a.step(*f)
        blob = a.snapshot()
        with pytest.raises(SnapshotError):
            StreamingKVCache.restore(blob[:-10])
        with pytest.raises(SnapshotError):
            StreamingKVCache.restore(blob[:3])
        flipped = bytearray(blob)
        flipped[40] ^= 0xFF
        with pytest.raises(SnapshotError):
            StreamingKVCache.restore(bytes(flipped))
        with pytest.raises(SnapshotError):
            StreamingKVCache.restore(b"NOPE" + blob[4:])
        wrong_version = bytearray(blob)
        wrong_version[4:6] = (2).to_bytes(2, "little")
        with pytest.raises(SnapshotError, match="version"):
            StreamingKVCache.restore(bytes(wrong_version))
