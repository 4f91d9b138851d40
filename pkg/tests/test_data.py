"""Synthetic dataset generation and shard behavior."""

import numpy as np
import pytest

from music_sim.data import make_blobs, merged_shard
from music_sim.errors import EmptyInput


def test_shapes_and_ownership():
    bundle = make_blobs(6, 3, {"ue0": 40, "ue1": 24}, test_size=16, seed=1)
    assert bundle.shard_of("ue0").x.shape == (40, 6)
    assert bundle.shard_of("ue1").labels.shape == (24,)
    assert bundle.test_x.shape == (16, 6)
    assert bundle.input_dim == 6 and bundle.n_classes == 3
    assert set(np.unique(bundle.test_labels)).issubset({0, 1, 2})
    with pytest.raises(EmptyInput):
        bundle.shard_of("ue9")


def test_generation_is_deterministic():
    a = make_blobs(4, 2, {"ue0": 16}, test_size=8, seed=7)
    b = make_blobs(4, 2, {"ue0": 16}, test_size=8, seed=7)
    assert np.array_equal(a.shard_of("ue0").x, b.shard_of("ue0").x)
    assert np.array_equal(a.test_x, b.test_x)


def test_shards_stable_under_other_nodes():
    """Adding another node's shard must not disturb existing shards or the
    test set (per-node substreams)."""
    small = make_blobs(4, 2, {"ue0": 16}, test_size=8, seed=7)
    big = make_blobs(4, 2, {"ue0": 16, "ue1": 32}, test_size=8, seed=7)
    assert np.array_equal(small.shard_of("ue0").x, big.shard_of("ue0").x)
    assert np.array_equal(small.test_x, big.test_x)


def test_cyclic_batches_wrap_around():
    bundle = make_blobs(4, 2, {"ue0": 10}, test_size=0, seed=3)
    shard = bundle.shard_of("ue0")
    x0, _ = shard.batch(0, 4)   # rows 0..3
    x2, _ = shard.batch(2, 4)   # rows 8,9,0,1
    assert np.array_equal(x2[2], x0[0])
    assert np.array_equal(x2[3], x0[1])
    assert x0.shape == (4, 4)


def test_batches_cover_all_rows_before_repeating():
    bundle = make_blobs(4, 2, {"ue0": 12}, test_size=0, seed=3)
    shard = bundle.shard_of("ue0")
    seen = np.concatenate([shard.batch(i, 4)[0] for i in range(3)])
    assert np.array_equal(seen, shard.x)


def test_merged_shard_concatenates_in_order():
    bundle = make_blobs(4, 2, {"ue0": 8, "ue1": 8}, test_size=0, seed=3)
    merged = merged_shard(bundle, ["ue1", "ue0"])
    assert merged.size == 16
    assert np.array_equal(merged.x[:8], bundle.shard_of("ue1").x)
    assert np.array_equal(merged.x[8:], bundle.shard_of("ue0").x)
    with pytest.raises(EmptyInput):
        merged_shard(bundle, [])


def test_classes_are_separable_enough_to_learn():
    # labels should be recoverable from nearest class center most of the time
    bundle = make_blobs(6, 3, {"ue0": 120}, test_size=0, seed=11)
    shard = bundle.shard_of("ue0")
    centers = np.stack([shard.x[shard.labels == c].mean(axis=0) for c in range(3)])
    nearest = np.argmin(
        ((shard.x[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    assert np.mean(nearest == shard.labels) > 0.9


def test_empty_shard_batch_rejected():
    bundle = make_blobs(4, 2, {"ue0": 8}, test_size=0, seed=3)
    shard = bundle.shard_of("ue0")
    empty = type(shard)(owner="x", x=shard.x[:0], labels=shard.labels[:0])
    with pytest.raises(EmptyInput):
        empty.batch(0, 4)
