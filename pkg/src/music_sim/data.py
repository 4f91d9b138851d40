"""Synthetic classification data: seeded Gaussian blobs, sharded per device.

Every shard is drawn from its own substream keyed by the owning node id, so a
device's local data does not depend on which other devices exist or on
iteration order. Batches cycle through the shard without reshuffling, which
keeps repeated runs and split-vs-central comparisons sample-for-sample
identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput


@dataclass
class Shard:
    """One node's local dataset."""

    owner: str
    x: np.ndarray       # (n, input_dim)
    labels: np.ndarray  # (n,) ints

    @property
    def size(self) -> int:
        return int(self.x.shape[0])

    def batch(self, iteration: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Cyclic minibatch for the given 0-based iteration."""
        if self.size == 0:
            raise EmptyInput(f"shard of {self.owner!r} is empty")
        idx = (np.arange(batch_size) + iteration * batch_size) % self.size
        return self.x[idx], self.labels[idx]


@dataclass
class DataBundle:
    shards: dict[str, Shard]
    test_x: np.ndarray
    test_labels: np.ndarray
    input_dim: int
    n_classes: int

    def shard_of(self, node_id: str) -> Shard:
        try:
            return self.shards[node_id]
        except KeyError:
            raise EmptyInput(f"no data shard for node {node_id!r}") from None


def _substream(base_seed: int, label: str) -> np.random.Generator:
    digest = hashlib.sha256(label.encode()).digest()
    tag = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([base_seed, tag]))


def make_blobs(input_dim: int, n_classes: int, shard_sizes: dict[str, int],
               test_size: int, seed: int, noise: float = 0.6,
               class_sep: float = 2.5) -> DataBundle:
    """Gaussian-blob dataset with per-node shards and a shared test set.

    Class centers come from one substream; each shard and the test set come
    from their own substreams, so shard contents are stable under adding or
    removing other nodes.
    """
    if n_classes < 2:
        raise EmptyInput(f"need at least 2 classes, got {n_classes}")
    centers = _substream(seed, "centers").standard_normal((n_classes, input_dim)) * class_sep

    def draw(rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.integers(0, n_classes, size=count)
        x = centers[labels] + noise * rng.standard_normal((count, input_dim))
        return x, labels

    shards = {}
    for owner, size in shard_sizes.items():
        x, labels = draw(_substream(seed, f"shard:{owner}"), int(size))
        shards[owner] = Shard(owner=owner, x=x, labels=labels)
    test_x, test_labels = draw(_substream(seed, "test"), int(test_size))
    return DataBundle(shards=shards, test_x=test_x, test_labels=test_labels,
                      input_dim=input_dim, n_classes=n_classes)


def merged_shard(bundle: DataBundle, owners: list[str]) -> Shard:
    """Concatenation of several shards in the given owner order."""
    if not owners:
        raise EmptyInput("no shard owners given")
    parts = [bundle.shard_of(o) for o in owners]
    return Shard(owner="+".join(owners),
                 x=np.concatenate([p.x for p in parts]),
                 labels=np.concatenate([p.labels for p in parts]))
