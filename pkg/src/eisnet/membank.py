"""Fixed-capacity FIFO bank of momentum embeddings with class labels.

The bank is the candidate pool for triplet mining; entries age out in strict
insertion order as new batches arrive. Snapshots are immutable views used
for one mining pass.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-4


@dataclass(frozen=True)
class BankRecord:
    v: np.ndarray  # unit-norm embedding
    label: int


class BankSnapshot:
    """Immutable view of the bank at one instant. Iterates as (index, record);
    exposes stacked arrays for vectorized distance computation."""

    def __init__(self, embeddings: np.ndarray, labels: np.ndarray):
        self.embeddings = embeddings
        self.labels = labels
        self.embeddings.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        for i in range(len(self)):
            yield i, self.record(i)

    def record(self, i: int) -> BankRecord:
        return BankRecord(v=self.embeddings[i], label=int(self.labels[i]))


class MemoryBank:
    """FIFO queue of (embedding, label) records with capacity m."""

    def __init__(self, capacity: int, dim: int = 128):
        if capacity <= 0:
            raise ValueError(f"bank capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._entries: deque[BankRecord] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def push_batch(self, records) -> int:
        """Appends records in order, evicting oldest entries past capacity.
        Returns the number evicted."""
        staged = []
        for rec in records:
            v = np.asarray(rec.v)
            if v.shape != (self.dim,):
                raise ValueError(f"bank record dim {v.shape} != ({self.dim},)")
            if abs(np.linalg.norm(v) - 1.0) > NORM_TOL:
                raise ValueError(f"bank record norm {np.linalg.norm(v):.6f} is not 1")
            staged.append(BankRecord(v=v.copy(), label=int(rec.label)))
        self._entries.extend(staged)
        evicted = max(0, len(self._entries) - self.capacity)
        for _ in range(evicted):
            self._entries.popleft()
        return evicted

    def push_embeddings(self, embeddings: np.ndarray, labels) -> int:
        return self.push_batch(
            BankRecord(v=v, label=int(y)) for v, y in zip(embeddings, labels))

    def snapshot(self) -> BankSnapshot:
        if not self._entries:
            return BankSnapshot(np.empty((0, self.dim)), np.empty((0,), dtype=np.int64))
        emb = np.stack([r.v for r in self._entries]).astype(np.float64, copy=True)
        labels = np.array([r.label for r in self._entries], dtype=np.int64)
        return BankSnapshot(emb, labels)
