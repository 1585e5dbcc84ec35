"""Memory bank with cosine-KNN label refinement, and the temporal key queue."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n < 1e-12, 1e-12, n)


class MemoryBank:
    """FIFO ring of (unit feature, probability vector) pairs."""

    def __init__(self, capacity: int, dim: int, classes: int):
        if capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        self.capacity, self.dim, self.classes = capacity, dim, classes
        self.features = np.zeros((capacity, dim))
        self.probs = np.zeros((capacity, classes))
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def update(self, features: np.ndarray, probs: np.ndarray) -> "MemoryBank":
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        if features.shape[1] != self.dim or probs.shape[1] != self.classes:
            raise ValueError(
                f"bank stores D={self.dim}, C={self.classes}; got D={features.shape[1]}, C={probs.shape[1]}"
            )
        if len(features) != len(probs):
            raise ValueError("features and probs must have the same batch size")
        for z, p in zip(_unit_rows(features), probs):
            self.features[self.cursor] = z
            self.probs[self.cursor] = p
            self.cursor = (self.cursor + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
        return self


def bank_update(bank: MemoryBank, features, probs) -> MemoryBank:
    return bank.update(features, probs)


def knn_neighbors(bank: MemoryBank, query: np.ndarray, K: int) -> np.ndarray:
    """Indices of the K most cosine-similar bank entries, most similar first.

    ``query`` may be a single D-vector or a Q x D batch.  Equal similarities
    are ordered by lower index.
    """
    if K > bank.size:
        raise ValueError(f"K={K} exceeds the {bank.size} stored entries; warm up the bank first")
    if K < 1:
        raise ValueError("K must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    sims = _unit_rows(np.atleast_2d(q)) @ bank.features[: bank.size].T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :K]
    return order[0] if single else order


@dataclass
class RefinedLabel:
    probs: np.ndarray
    label: Union[int, np.ndarray]
    neighbor_indices: np.ndarray


def refine_pseudo_label(bank: MemoryBank, query: np.ndarray, K: int) -> RefinedLabel:
    """Average the stored probabilities of the K nearest neighbours; argmax gives the label."""
    idx = knn_neighbors(bank, query, K)
    p_hat = bank.probs[idx].mean(axis=-2)
    label = np.argmax(p_hat, axis=-1)
    return RefinedLabel(p_hat, int(label) if np.ndim(label) == 0 else label, idx)


History = Dict[int, int]  # epoch -> pseudo label


class TemporalQueue:
    """FIFO queue of key features whose owners keep a pseudo-label history.

    Histories are kept per sample id and trimmed to the last ``T`` epochs; a
    key recorded without an id gets a fresh one.
    """

    def __init__(self, capacity: int, dim: int, T: int):
        if capacity < 1 or T < 1:
            raise ValueError("queue capacity and T must be >= 1")
        self.capacity, self.dim, self.T = capacity, dim, T
        self.keys = np.zeros((capacity, dim))
        self.owner = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        self.cursor = 0
        self.histories: Dict[int, History] = {}
        self._next_id = -2

    def __len__(self):
        return self.size

    def _trim(self, h: History, epoch: int):
        for e in [e for e in h if e <= epoch - self.T]:
            del h[e]

    def history(self, sample_id: int) -> History:
        return dict(self.histories.get(sample_id, {}))

    def entry_history(self, j: int) -> History:
        return self.histories.get(int(self.owner[j]), {})

    def record(self, keys: np.ndarray, labels, epoch: int,
               sample_ids: Optional[Sequence[int]] = None) -> "TemporalQueue":
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise ValueError(f"queue stores D={self.dim}; got keys of width {keys.shape[1]}")
        labels = np.atleast_1d(labels)
        if sample_ids is None:
            sample_ids = []
            for _ in range(len(keys)):
                sample_ids.append(self._next_id)
                self._next_id -= 1
        for k, y, sid in zip(_unit_rows(keys), labels, sample_ids):
            sid = int(sid)
            h = self.histories.setdefault(sid, {})
            h[int(epoch)] = int(y)
            self._trim(h, epoch)
            self.keys[self.cursor] = k
            self.owner[self.cursor] = sid
            self.cursor = (self.cursor + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
        return self

    def history_matrix(self, epoch: int) -> np.ndarray:
        """size x T labels for epochs ``epoch-T+1 .. epoch`` (-1 where absent)."""
        out = np.full((self.size, self.T), -1, dtype=np.int64)
        for j in range(self.size):
            for e, y in self.entry_history(j).items():
                col = e - (epoch - self.T + 1)
                if 0 <= col < self.T:
                    out[j, col] = y
        return out


def queue_record(queue: TemporalQueue, keys, labels, epoch: int, sample_ids=None) -> TemporalQueue:
    return queue.record(keys, labels, epoch, sample_ids)


def _as_history(h: Union[Mapping[int, int], Sequence[int]]) -> History:
    if isinstance(h, Mapping):
        return {int(e): int(y) for e, y in h.items()}
    return {i: int(y) for i, y in enumerate(h)}


def exclusion_set(queue: TemporalQueue, query_history) -> np.ndarray:
    """Queue indices whose history never shares a label with the query's.

    Histories are compared epoch by epoch; an entry is kept iff at every epoch
    present in both, the labels differ.  Entries with no history are kept.
    """
    qh = _as_history(query_history)
    keep = []
    for j in range(queue.size):
        eh = queue.entry_history(j)
        if all(eh[e] != y for e, y in qh.items() if e in eh):
            keep.append(j)
    return np.asarray(keep, dtype=np.int64)


def exclusion_mask(queue: TemporalQueue, query_histories: Sequence[History], epoch: int) -> np.ndarray:
    """Batched :func:`exclusion_set` restricted to the window ending at ``epoch``:
    boolean B x size, True where the entry may serve as a negative."""
    H = queue.history_matrix(epoch)
    Q = np.full((len(query_histories), queue.T), -1, dtype=np.int64)
    for i, h in enumerate(query_histories):
        for e, y in h.items():
            col = e - (epoch - queue.T + 1)
            if 0 <= col < queue.T:
                Q[i, col] = y
    clash = (Q[:, None, :] == H[None, :, :]) & (Q[:, None, :] >= 0)
    return ~clash.any(axis=2)
