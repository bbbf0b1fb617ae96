"""Dense per-head tensors and the frame/cache token layouts shared by every module."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes or token counts do not line up."""


@dataclass(frozen=True)
class HeadTensor:
    """Row-major ``[heads, tokens, channels]`` activations.

    Tokens sit on the middle axis so a token gather copies contiguous
    ``channels``-length runs per head.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if data.ndim != 3:
            raise ShapeError(f"expected [heads, tokens, channels], got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[2] < 1:
            raise ShapeError(f"heads and channels must be positive, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("HeadTensor values must be finite")
        object.__setattr__(self, "data", data)

    @property
    def heads(self) -> int:
        return self.data.shape[0]

    @property
    def tokens(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def take_tokens(self, indices) -> HeadTensor:
        return HeadTensor(self.data[:, np.asarray(indices, dtype=np.intp), :])

    def slice_tokens(self, start: int, stop: int) -> HeadTensor:
        return HeadTensor(self.data[:, start:stop, :])

    def astype(self, dtype) -> HeadTensor:
        return HeadTensor(self.data.astype(dtype, copy=False))


def concat_tokens(*parts: HeadTensor) -> HeadTensor:
    """Concatenate along the token axis; heads and channels must agree."""
    if not parts:
        raise ShapeError("nothing to concatenate")
    heads, channels = parts[0].heads, parts[0].channels
    for p in parts[1:]:
        if p.heads != heads or p.channels != channels:
            raise ShapeError(f"cannot concatenate {p.shape} onto [{heads}, *, {channels}]")
    return HeadTensor(np.concatenate([p.data for p in parts], axis=1))


@dataclass(frozen=True)
class FrameLayout:
    """Per-frame token structure: one camera token, ``R`` registers, ``N`` patches."""

    register_tokens: int
    patch_tokens: int
    camera_tokens: int = 1

    def __post_init__(self) -> None:
        if self.camera_tokens != 1:
            raise ValueError("a frame carries exactly one camera token")
        if self.register_tokens < 0:
            raise ValueError("register_tokens must be non-negative")
        if self.patch_tokens < 1:
            raise ValueError("patch_tokens must be positive")

    def total(self) -> int:
        return self.camera_tokens + self.register_tokens + self.patch_tokens

    def special_count(self) -> int:
        return self.camera_tokens + self.register_tokens

    @classmethod
    def from_total(cls, tokens_per_frame: int, register_tokens: int) -> FrameLayout:
        return cls(register_tokens=register_tokens, patch_tokens=tokens_per_frame - 1 - register_tokens)


@dataclass(frozen=True)
class CacheSegments:
    """Token spans of a cache: protected first frame, prunable middle, protected current frame."""

    first_len: int
    middle_len: int
    current_len: int

    def __post_init__(self) -> None:
        if min(self.first_len, self.middle_len, self.current_len) < 0:
            raise ValueError(f"segment lengths must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.first_len + self.middle_len + self.current_len

    @property
    def middle_start(self) -> int:
        return self.first_len

    @property
    def middle_stop(self) -> int:
        return self.first_len + self.middle_len


def split_special_normal(q: HeadTensor, layout: FrameLayout) -> tuple[HeadTensor, HeadTensor]:
    """Split a frame's tokens into camera+register (leading) and patch (trailing) tokens."""
    if q.tokens != layout.total():
        raise ShapeError(f"frame has {q.tokens} tokens, layout expects {layout.total()}")
    n_special = layout.special_count()
    return q.slice_tokens(0, n_special), q.slice_tokens(n_special, q.tokens)
