import numpy as np
import pytest

from kvstream.bench.workload import WorkloadConfig, gen_workload, outlier_channel_set
from kvstream.tensors import FrameLayout


def small(**kw):
    base = dict(frames=8, layout=FrameLayout(1, 30), heads=2, head_dim=64, seed=11)
    base.update(kw)
    return WorkloadConfig(**base)


def channel_std(k):
    return k.data.reshape(-1, k.channels).std(axis=0)


def test_no_outliers_is_isotropic():
    frames = gen_workload(small(outlier_channels=0.0, frames=16))
    keys = np.concatenate([k.data.reshape(-1, 64) for _, k, _ in frames])
    std = keys.std(axis=0)
    assert np.all(np.abs(std - 1.0) < 0.15)


def test_outlier_channels_are_fixed():
    cfg = small(outlier_channels=1 / 16, outlier_scale=20.0)
    boosted = outlier_channel_set(cfg)
    assert boosted.size == 4
    for _, k, _ in gen_workload(cfg):
        big = np.nonzero(channel_std(k) > 5.0)[0]
        np.testing.assert_array_equal(big, boosted)


def test_outlier_count_rounds_up():
    assert small(outlier_channels=0.01).n_outlier_channels == 1


def test_independent_frames_are_uncorrelated():
    frames = gen_workload(small(frames=64, temporal_correlation=0.0, outlier_channels=0.0))
    flat = [q.data.ravel().astype(np.float64) for q, _, _ in frames]
    r = [np.corrcoef(a, b)[0, 1] for a, b in zip(flat, flat[1:])]
    # ~3.9k samples per pair, 63 pairs: 4 standard errors of the mean correlation
    assert abs(np.mean(r)) < 4 / np.sqrt(flat[0].size * len(r))


def test_ar_coefficient_sets_lag_one_correlation():
    frames = gen_workload(small(frames=32, temporal_correlation=0.8, outlier_channels=0.0))
    flat = [v.data.ravel().astype(np.float64) for _, _, v in frames]
    r = np.mean([np.corrcoef(a, b)[0, 1] for a, b in zip(flat, flat[1:])])
    assert r == pytest.approx(0.8, abs=0.03)


def test_seeded_generation_is_bitwise_reproducible():
    a = gen_workload(small())
    b = gen_workload(small())
    assert all(x.data.tobytes() == y.data.tobytes() for fa, fb in zip(a, b) for x, y in zip(fa, fb))
    c = gen_workload(small(seed=12))
    assert a[0][0].data.tobytes() != c[0][0].data.tobytes()


@pytest.mark.parametrize("kw", [dict(temporal_correlation=1.0), dict(outlier_channels=1.5), dict(frames=-1)])
def test_rejects_invalid(kw):
    with pytest.raises(ValueError):
        small(**kw)
