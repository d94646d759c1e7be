"""Identity-balanced P x K batch sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import TooFewClasses


@dataclass(frozen=True)
class BatchPlan:
    sample_indices: np.ndarray
    class_ids: tuple  # the P identities, in batch order
    P: int
    K: int


def _labels(dataset) -> np.ndarray:
    return np.asarray(getattr(dataset, "class_ids", dataset))


class PKSampler:
    """Draws batches of P identities with K samples each.

    Within an epoch every class is cut into chunks of K indices drawn without
    replacement (a class smaller than K contributes one chunk padded by
    drawing with replacement). Batches take P classes that still hold
    chunks, preferring those with the most left, so every class is visited
    ``max(1, n_c // K)`` times per epoch. The last batch of an epoch is topped
    up with fresh chunks of other classes when fewer than P remain.
    """

    def __init__(self, dataset, P: int, K: int, seed: int = 0):
        if P < 1 or K < 1:
            raise ValueError("P and K must be >= 1")
        self.labels = _labels(dataset)
        self.classes = np.unique(self.labels)
        if len(self.classes) < P:
            raise TooFewClasses(f"need {P} identities, dataset has {len(self.classes)}")
        self.members = {c: np.flatnonzero(self.labels == c) for c in self.classes}
        self.P, self.K = P, K
        self.rng = np.random.default_rng(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._pending = []

    def _chunk(self, c) -> np.ndarray:
        m = self.members[c]
        if len(m) >= self.K:
            return self.rng.choice(m, self.K, replace=False)
        # every member once, the rest with replacement
        extra = self.rng.choice(m, self.K - len(m), replace=True)
        return self.rng.permutation(np.concatenate([m, extra]))

    def _epoch_chunks(self) -> dict:
        chunks = {}
        for c in self.classes:
            m = self.members[c]
            if len(m) < self.K:
                chunks[c] = [self._chunk(c)]
                continue
            perm = self.rng.permutation(m)
            n = len(m) // self.K
            chunks[c] = [perm[i * self.K:(i + 1) * self.K] for i in range(n)]
        return chunks

    def epoch(self) -> list:
        """Plan one full epoch of batches."""
        chunks = self._epoch_chunks()
        batches = []
        while any(chunks.values()):
            avail = [c for c in self.classes if chunks[c]]
            tie = self.rng.random(len(avail))
            order = sorted(range(len(avail)), key=lambda i: (-len(chunks[avail[i]]), tie[i]))
            chosen = [avail[i] for i in order[:self.P]]
            idx = [chunks[c].pop() for c in chosen]
            if len(chosen) < self.P:
                spare = [c for c in self.classes if c not in set(chosen)]
                for c in self.rng.choice(spare, self.P - len(chosen), replace=False):
                    chosen.append(c)
                    idx.append(self._chunk(c))
            batches.append(BatchPlan(np.concatenate(idx).astype(np.int64), tuple(int(c) for c in chosen),
                                     self.P, self.K))
        return batches

    def next_batch(self) -> BatchPlan:
        if not self._pending:
            self._pending = self.epoch()[::-1]
        return self._pending.pop()


def next_batch(sampler: PKSampler) -> BatchPlan:
    return sampler.next_batch()


def epoch_plan(dataset, P: int, K: int, seed: int) -> list:
    return PKSampler(dataset, P, K, seed).epoch()
