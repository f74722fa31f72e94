"""Train-set lookups and uniform negative sampling."""

from __future__ import annotations

import numpy as np

from .dataset import InteractionDataset

MAX_REJECTION_ROUNDS = 1000


class TrainIndex:
    """Per-user positive lists plus O(log n) membership tests on ``(u, v)``."""

    def __init__(self, dataset: InteractionDataset):
        self.num_users = dataset.num_users
        self.num_items = dataset.num_items
        self.groups = dataset.groups
        self.indptr, self.items = dataset.train_csr()
        self.counts = np.diff(self.indptr)
        self.keys = np.sort(np.unique(dataset.pair_keys(dataset.train)))
        self.train = dataset.train
        if (self.counts >= self.num_items).any():
            u = int(np.argmax(self.counts >= self.num_items))
            raise ValueError(f"user {u} has interacted with every item; no negatives exist")

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        q = users.astype(np.int64) * self.num_items + items
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == q

    def sample_positives(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        counts = self.counts[users]
        offs = np.floor(rng.random(len(users)) * counts).astype(np.int64)
        return self.items[self.indptr[users] + np.minimum(offs, counts - 1)]

    def sample_negatives(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw from ``V \\ R_u`` for each user, by rejection."""
        neg = rng.integers(0, self.num_items, size=len(users))
        bad = self.contains(users, neg)
        rounds = 0
        while bad.any():
            rounds += 1
            if rounds > MAX_REJECTION_ROUNDS:
                raise RuntimeError("negative sampling failed to converge")
            idx = np.flatnonzero(bad)
            neg[idx] = rng.integers(0, self.num_items, size=len(idx))
            bad[idx] = self.contains(users[idx], neg[idx])
        return neg

    def epoch_triples(self, rng: np.random.Generator) -> np.ndarray:
        """Every train positive once, shuffled, with one fresh negative each."""
        order = rng.permutation(len(self.train))
        pairs = self.train[order]
        neg = self.sample_negatives(pairs[:, 0], rng)
        return np.column_stack([pairs, neg])
