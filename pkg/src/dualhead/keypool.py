"""Key dictionaries for the contrastive losses.

Two interchangeable generators sit behind one sampling contract:

* ``MocoQueues``: one FIFO buffer per class, filled with detached keys
  from the momentum twin, oldest entries evicted at capacity;
* ``MemoryBank``: one momentum-mixed snapshot per training example,
  re-normalized to the unit sphere after every update.

Sampling returns a ``KeyBatch`` whose slot 0 is always the query's own
key, so the softmax bank has K+1 rows and the query's positive set is
never empty. Draws are uniform with replacement (early buffers can hold
fewer entries than requested), balanced per class, and fully determined
by the caller's generator.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .ndgrad import Tensor

UNIT_TOL = 1e-9


class EmptyPoolError(RuntimeError):
    """Sampling was attempted before any key was available."""


@dataclass
class KeyEntry:
    """One detached key: unit feature vector, unit projection, class label."""

    h_key: np.ndarray
    z_key: np.ndarray
    label: int

    def __post_init__(self) -> None:
        self.h_key = np.asarray(self.h_key, dtype=np.float64)
        self.z_key = np.asarray(self.z_key, dtype=np.float64)
        self.label = int(self.label)
        for name, vec in (("h_key", self.h_key), ("z_key", self.z_key)):
            if vec.ndim != 1:
                raise ValueError(f"{name} must be 1-D, got shape {vec.shape}")
            norm = float(np.linalg.norm(vec))
            if abs(norm - 1.0) > UNIT_TOL:
                raise ValueError(f"{name} must be unit-norm, got |v|={norm!r}")


@dataclass
class KeyBatch:
    """K+1 keys for one query; slot 0 is the query's own key."""

    h_keys: Tensor  # ((K+1) x d), grad-disabled
    z_keys: Tensor  # ((K+1) x L), grad-disabled
    labels: np.ndarray  # (K+1,) int64

    @property
    def size(self) -> int:
        """K: the number of sampled keys, excluding the query slot."""
        return int(self.labels.shape[0]) - 1

    def positive_mask(self, label: int) -> np.ndarray:
        return self.labels == int(label)


def _make_batch(query: KeyEntry, entries: list[KeyEntry]) -> KeyBatch:
    rows = [query, *entries]
    h = np.stack([e.h_key for e in rows])
    z = np.stack([e.z_key for e in rows])
    labels = np.array([e.label for e in rows], dtype=np.int64)
    return KeyBatch(h_keys=Tensor(h), z_keys=Tensor(z), labels=labels)


class MocoQueues:
    """Per-class FIFO buffers of detached keys, each capped at queue_size."""

    def __init__(self, class_count: int, queue_size: int):
        if class_count < 1 or queue_size < 1:
            raise ValueError("class_count and queue_size must be positive")
        self.class_count = int(class_count)
        self.queue_size = int(queue_size)
        self._queues: list[deque[KeyEntry]] = [deque(maxlen=queue_size) for _ in range(class_count)]

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues)

    def class_sizes(self) -> list[int]:
        return [len(q) for q in self._queues]

    def entries(self, label: int) -> list[KeyEntry]:
        return list(self._queues[label])

    def enqueue(self, entries: list[KeyEntry]) -> None:
        """Append each entry to its class buffer, evicting the oldest at capacity."""
        for e in entries:
            if not 0 <= e.label < self.class_count:
                raise IndexError(f"label {e.label} out of range [0, {self.class_count})")
            self._queues[e.label].append(e)

    def sample(self, keys_per_class: int, query_entry: KeyEntry, rng: np.random.Generator) -> KeyBatch:
        """Draw keys_per_class keys from every non-empty class, query first.

        Classes are visited in ascending index order and draws are made
        with one ``rng.integers`` call per class, so a seeded generator
        replays the exact same batch.
        """
        if keys_per_class < 1:
            raise ValueError("keys_per_class must be >= 1")
        if len(self) == 0:
            raise EmptyPoolError("all class buffers are empty; warm the pool up first")
        picked: list[KeyEntry] = []
        for q in self._queues:
            if not q:
                continue
            idx = rng.integers(0, len(q), size=keys_per_class)
            picked.extend(q[int(i)] for i in idx)
        return _make_batch(query_entry, picked)


class MemoryBank:
    """Per-example key snapshots, momentum-mixed and re-normalized on update."""

    def __init__(self, labels: np.ndarray, m_bank: float = 0.5):
        if not 0.0 <= m_bank <= 1.0:
            raise ValueError(f"bank momentum must be in [0, 1], got {m_bank}")
        self.labels = np.asarray(labels, dtype=np.int64).copy()
        if self.labels.ndim != 1 or self.labels.size == 0:
            raise ValueError("labels must be a nonempty 1-D array")
        self.m_bank = float(m_bank)
        self.h_snap: np.ndarray | None = None
        self.z_snap: np.ndarray | None = None
        self._by_class: dict[int, np.ndarray] = {
            int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)
        }

    def __len__(self) -> int:
        return 0 if self.h_snap is None else int(self.labels.shape[0])

    @property
    def initialized(self) -> bool:
        return self.h_snap is not None

    def initialize(self, h: np.ndarray, z: np.ndarray) -> None:
        """Install the first full set of snapshots (one per example)."""
        h = np.asarray(h, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if h.shape[0] != self.labels.shape[0] or z.shape[0] != self.labels.shape[0]:
            raise ValueError("snapshot row count must equal the number of examples")
        self.h_snap = h / np.linalg.norm(h, axis=1, keepdims=True)
        self.z_snap = z / np.linalg.norm(z, axis=1, keepdims=True)

    def entry(self, example_id: int) -> KeyEntry:
        if not self.initialized:
            raise EmptyPoolError("memory bank has no snapshots; warm it up first")
        i = int(example_id)
        return KeyEntry(h_key=self.h_snap[i].copy(), z_key=self.z_snap[i].copy(), label=int(self.labels[i]))

    def update(self, ids: np.ndarray, h_new: np.ndarray, z_new: np.ndarray) -> None:
        """snapshot <- m*old + (1-m)*new per row, then back to unit norm."""
        if not self.initialized:
            raise EmptyPoolError("memory bank has no snapshots; warm it up first")
        idx = np.asarray(ids, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.labels.shape[0]):
            raise IndexError("example id out of range")
        m = self.m_bank
        for snap, new in ((self.h_snap, np.asarray(h_new, dtype=np.float64)),
                          (self.z_snap, np.asarray(z_new, dtype=np.float64))):
            mixed = m * snap[idx] + (1.0 - m) * new
            snap[idx] = mixed / np.linalg.norm(mixed, axis=1, keepdims=True)

    def sample(
        self,
        count_per_class: int,
        query_entry: KeyEntry,
        rng: np.random.Generator,
        uniform: bool = False,
    ) -> KeyBatch:
        """Same contract as MocoQueues.sample, drawing from the snapshots.

        ``uniform=True`` switches from balanced per-class draws to global
        uniform draws over all snapshots (same batch size either way).
        """
        if count_per_class < 1:
            raise ValueError("count_per_class must be >= 1")
        if not self.initialized:
            raise EmptyPoolError("memory bank has no snapshots; warm it up first")
        if uniform:
            total = count_per_class * len(self._by_class)
            idx = rng.integers(0, self.labels.shape[0], size=total)
        else:
            parts = []
            for c in sorted(self._by_class):
                pool = self._by_class[c]
                parts.append(pool[rng.integers(0, pool.shape[0], size=count_per_class)])
            idx = np.concatenate(parts)
        picked = [
            KeyEntry(h_key=self.h_snap[int(i)].copy(), z_key=self.z_snap[int(i)].copy(), label=int(self.labels[int(i)]))
            for i in idx
        ]
        return _make_batch(query_entry, picked)


def enqueue(pool: MocoQueues, entries: list[KeyEntry]) -> None:
    pool.enqueue(entries)


def sample_keys(pool: MocoQueues, keys_per_class: int, query_entry: KeyEntry, rng: np.random.Generator) -> KeyBatch:
    return pool.sample(keys_per_class, query_entry, rng)


def bank_update(bank: MemoryBank, ids: np.ndarray, h_q_norm: np.ndarray, z_q: np.ndarray) -> None:
    bank.update(ids, h_q_norm, z_q)


def bank_sample(
    bank: MemoryBank,
    count_per_class: int,
    query_entry: KeyEntry,
    rng: np.random.Generator,
    uniform: bool = False,
) -> KeyBatch:
    return bank.sample(count_per_class, query_entry, rng, uniform=uniform)
