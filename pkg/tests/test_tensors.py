import numpy as np
import pytest
from hypothesis import given, strategies as st

from kvstream.tensors import (
    CacheSegments,
    FrameLayout,
    HeadTensor,
    ShapeError,
    concat_tokens,
    split_special_normal,
)


def test_layout_counts():
    layout = FrameLayout(register_tokens=4, patch_tokens=8)
    assert layout.total() == 13
    assert layout.special_count() == 5
    assert FrameLayout.from_total(64, 4) == FrameLayout(4, 59)


def test_layout_rejects_bad_counts():
    with pytest.raises(ValueError):
        FrameLayout(register_tokens=-1, patch_tokens=4)
    with pytest.raises(ValueError):
        FrameLayout(register_tokens=0, patch_tokens=0)


def test_split_counts():
    q = HeadTensor(np.zeros((2, 13, 3)))
    special, normal = split_special_normal(q, FrameLayout(4, 8))
    assert special.tokens == 5
    assert normal.tokens == 8


def test_split_minimal_layout():
    q = HeadTensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
    special, normal = split_special_normal(q, FrameLayout(0, 1))
    np.testing.assert_array_equal(special.data, [[[1.0]], [[3.0]]])
    np.testing.assert_array_equal(normal.data, [[[2.0]], [[4.0]]])


def test_split_shape_mismatch():
    with pytest.raises(ShapeError):
        split_special_normal(HeadTensor(np.zeros((1, 12, 2))), FrameLayout(4, 8))


@given(
    heads=st.integers(1, 3),
    registers=st.integers(0, 5),
    patches=st.integers(1, 9),
    channels=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_split_round_trip_bitwise(heads, registers, patches, channels, seed):
    layout = FrameLayout(registers, patches)
    data = np.random.default_rng(seed).standard_normal((heads, layout.total(), channels)).astype(np.float32)
    special, normal = split_special_normal(HeadTensor(data), layout)
    assert concat_tokens(special, normal).data.tobytes() == data.tobytes()


def test_take_tokens_preserves_rows(rng):
    data = rng.standard_normal((3, 10, 4)).astype(np.float32)
    picked = HeadTensor(data).take_tokens([7, 0, 3])
    assert picked.shape == (3, 3, 4)
    np.testing.assert_array_equal(picked.data, data[:, [7, 0, 3], :])


def test_head_tensor_invariants():
    with pytest.raises(ValueError):
        HeadTensor(np.array([[[np.nan]]]))
    with pytest.raises(ShapeError):
        HeadTensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        HeadTensor(np.zeros((0, 3, 2)))
    assert HeadTensor(np.zeros((1, 0, 2))).tokens == 0


def test_concat_rejects_mismatched_heads():
    with pytest.raises(ShapeError):
        concat_tokens(HeadTensor(np.zeros((1, 2, 3))), HeadTensor(np.zeros((2, 2, 3))))


def test_segments_total():
    seg = CacheSegments(first_len=3, middle_len=5, current_len=2)
    assert seg.total == 10
    assert (seg.middle_start, seg.middle_stop) == (3, 8)
    with pytest.raises(ValueError):
        CacheSegments(-1, 0, 0)
