import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distileval.augment import (
    POOL,
    AugmentConfig,
    augment_batch,
    image_rng,
    k_for_ipc,
    sample_ops,
)
from distileval.errors import ConfigError


def batch(n=4, c=3, h=16, w=16, seed=0):
    return np.random.default_rng(seed).random((n, c, h, w), dtype=np.float32)


def test_k_zero_is_identity():
    x = batch()
    out = augment_batch(x, AugmentConfig(k=0), seed=1, epoch=2)
    assert np.array_equal(out, x) and out is not x


def test_flip_only_reverses_columns():
    x = batch()
    out = augment_batch(x, AugmentConfig(k=1, pool=("flip",)), seed=3, epoch=0)
    oracle = np.array([[[row[::-1] for row in ch] for ch in img] for img in x.tolist()], dtype=np.float32)
    assert np.array_equal(out, oracle)


def test_same_triple_is_bitwise_identical():
    x = batch()
    cfg = AugmentConfig(k=3)
    a = augment_batch(x, cfg, seed=5, epoch=7, base_index=10)
    b = augment_batch(x, cfg, seed=5, epoch=7, base_index=10)
    assert np.array_equal(a, b)


def test_independent_of_batch_split():
    x = batch(n=6)
    cfg = AugmentConfig(k=2)
    whole = augment_batch(x, cfg, seed=9, epoch=1, base_index=100)
    parts = np.concatenate([
        augment_batch(x[:2], cfg, seed=9, epoch=1, base_index=100),
        augment_batch(x[2:], cfg, seed=9, epoch=1, base_index=102),
    ])
    assert np.array_equal(whole, parts)


def test_epoch_changes_draw():
    x = batch()
    cfg = AugmentConfig(k=2)
    assert not np.array_equal(augment_batch(x, cfg, 0, 0), augment_batch(x, cfg, 0, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.integers(0, 2**31), st.sampled_from([(1, 8, 8), (3, 16, 16), (3, 32, 32), (3, 12, 20)]))
def test_shape_and_range(k, seed, shape):
    x = np.random.default_rng(seed).random((2, *shape), dtype=np.float32)
    out = augment_batch(x, AugmentConfig(k=k), seed=seed, epoch=0)
    assert out.shape == x.shape and out.dtype == x.dtype
    assert out.min() >= 0.0 and out.max() <= 1.0


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_sampled_ops_distinct(k, seed):
    ops = sample_ops(AugmentConfig(k=k), image_rng(seed, 0, 0))
    assert len(ops) == k == len(set(ops)) and set(ops) <= set(POOL)


def test_op_draw_roughly_uniform():
    counts = dict.fromkeys(POOL, 0)
    cfg = AugmentConfig(k=1)
    for i in range(6000):
        counts[sample_ops(cfg, image_rng(0, 0, i))[0]] += 1
    assert all(800 < c < 1200 for c in counts.values())


def test_k_exceeding_pool_rejected():
    with pytest.raises(ConfigError):
        AugmentConfig(k=3, pool=("flip", "crop"))


@pytest.mark.parametrize("pool", [("flip", "flip"), ("flip", "mixup")])
def test_bad_pool_rejected(pool):
    with pytest.raises(ConfigError):
        AugmentConfig(k=1, pool=pool)


def test_auto_k_by_ipc():
    assert k_for_ipc(1) == 4 and k_for_ipc(10) == 2 and k_for_ipc(50) == 2
    assert AugmentConfig().resolve(1).k == 4
    assert AugmentConfig().resolve(10).k == 2
    assert AugmentConfig(k=1).resolve(1).k == 1


def test_unresolved_auto_rejected():
    with pytest.raises(ConfigError):
        augment_batch(batch(), AugmentConfig(), 0, 0)


def test_rejects_non_batched_input():
    with pytest.raises(ConfigError):
        augment_batch(batch()[0], AugmentConfig(k=1), 0, 0)


def test_input_not_mutated():
    x = batch()
    before = x.copy()
    augment_batch(x, AugmentConfig(k=6), seed=0, epoch=0)
    assert np.array_equal(x, before)
