"""Bounded, quantized KV cache for frame-wise causal attention over streaming inputs."""

from .attention import ReferenceStream, attend, reference_stream
from .pruner import importance_scores, key_summary, pool_queries, select_keep_indices
from .quantizer import (
    QuantParams,
    QuantizedTensor,
    dequantize,
    dequantize_tensor,
    quant_params,
    quantize,
    quantize_key_per_channel,
    quantize_value_per_token,
)
from .stream_cache import CacheConfig, ConfigError, SnapshotError, StreamingKVCache, new_cache
from .tensors import CacheSegments, FrameLayout, HeadTensor, ShapeError, split_special_normal

__version__ = "0.1.0"

__all__ = [
    "CacheConfig",
    "CacheSegments",
    "ConfigError",
    "FrameLayout",
    "HeadTensor",
    "QuantParams",
    "QuantizedTensor",
    "ReferenceStream",
    "ShapeError",
    "SnapshotError",
    "StreamingKVCache",
    "attend",
    "dequantize",
    "dequantize_tensor",
    "importance_scores",
    "key_summary",
    "new_cache",
    "pool_queries",
    "quant_params",
    "quantize",
    "quantize_key_per_channel",
    "quantize_value_per_token",
    "reference_stream",
    "select_keep_indices",
    "split_special_normal",
]
