"""Exploring Pool, pseudo-groundtruth labels and the reasoner loss."""

from __future__ import annotations

import csv
import enum
import threading
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


class Purpose(enum.IntEnum):
    """Action purpose; the integer value is the reasoner output index."""

    BREAKOUT = 0
    SELF_IMPROVEMENT = 1
    HOVERING = 2
    PROSPECT = 3

    @property
    def label(self) -> str:
        return _NAMES[self]


_NAMES = {
    Purpose.BREAKOUT: "Breakout",
    Purpose.SELF_IMPROVEMENT: "Self-improvement",
    Purpose.HOVERING: "Hovering",
    Purpose.PROSPECT: "Prospect",
}
PURPOSE_NAMES = tuple(_NAMES[p] for p in Purpose)

_BITS_TO_PURPOSE = {
    (1, 1): Purpose.BREAKOUT,
    (1, 0): Purpose.SELF_IMPROVEMENT,
    (0, 0): Purpose.HOVERING,
    (0, 1): Purpose.PROSPECT,
}
_PURPOSE_TO_BITS = {v: k for k, v in _BITS_TO_PURPOSE.items()}


def purpose_from_name(name: str) -> Purpose:
    for p, n in _NAMES.items():
        if n == name:
            return p
    raise ValueError(f"unknown purpose {name!r}")


@dataclass(frozen=True)
class PurposeLabel:
    """Two-bit label: (gain bit, exploration bit)."""

    g_bit: int
    se_bit: int

    def __post_init__(self):
        if self.g_bit not in (0, 1) or self.se_bit not in (0, 1):
            raise ValueError("label bits must be 0 or 1")

    @property
    def category(self) -> Purpose:
        return _BITS_TO_PURPOSE[(self.g_bit, self.se_bit)]

    @classmethod
    def from_category(cls, category) -> "PurposeLabel":
        return cls(*_PURPOSE_TO_BITS[Purpose(category)])

    def one_hot(self) -> np.ndarray:
        y = np.zeros(len(Purpose), dtype=np.float32)
        y[self.category] = 1.0
        return y


@dataclass(frozen=True)
class PoolEntry:
    g: float
    se: float
    label: PurposeLabel
    insert_index: int
    warmup: bool = False


class ExploringPool:
    """Fixed-capacity FIFO of (G, S_e, label) tuples.

    ``payloads`` optionally carries a training sample (the Δs array) for each
    entry so reasoner minibatches can be drawn from the pool contents.
    """

    def __init__(self, capacity: int = 1000, seed: int = 0, warmup: int = 10):
        if capacity < 2:
            raise ValueError("pool capacity must be at least 2")
        self.capacity = capacity
        self.warmup = warmup
        self.rng = np.random.default_rng(seed)
        self.entries: deque = deque(maxlen=capacity)
        self.payloads: deque = deque(maxlen=capacity)
        self._next_index = 0
        # ring buffers mirroring entries for fast threshold sampling
        self._g = np.zeros(capacity)
        self._se = np.zeros(capacity)
        self._head = 0
        self.lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def next_index(self) -> int:
        return self._next_index

    def push(self, entry: PoolEntry, payload=None) -> Optional[PoolEntry]:
        """Append; returns the evicted entry when the pool was full."""
        with self.lock:
            full = len(self.entries) == self.capacity
            evicted = self.entries[0] if full else None
            slot = (self._head + len(self.entries)) % self.capacity
            self._g[slot], self._se[slot] = entry.g, entry.se
            if full:
                self._head = (self._head + 1) % self.capacity
            self.entries.append(entry)
            self.payloads.append(payload)
            self._next_index = max(self._next_index, entry.insert_index + 1)
            return evicted

    def make_entry(self, g: float, se: float, label: PurposeLabel, warmup: bool = False) -> PoolEntry:
        return PoolEntry(float(g), float(se), label, self._next_index, warmup)

    def thresholds(self) -> tuple:
        """Means of G and S_e over one random half of the pool (one shared draw)."""
        n = len(self.entries)
        if n == 0:
            raise ContractError("cannot label against an empty Exploring Pool")
        k = max(1, n // 2)
        idx = (self.rng.choice(n, size=k, replace=False) + self._head) % self.capacity
        return float(self._g[idx].mean()), float(self._se[idx].mean())

    def label_and_push(self, g: float, se: float, payload=None) -> PoolEntry:
        """pseudo_label followed by push, atomically."""
        with self.lock:
            warm = len(self.entries) < self.warmup
            # the very first entry is its own reference, so both bits tie to 1
            label = pseudo_label(g, se, self) if self.entries else PurposeLabel(1, 1)
            entry = self.make_entry(g, se, label, warm)
            self.push(entry, payload)
            return entry

    def proportions(self) -> np.ndarray:
        with self.lock:
            labels = [e.label for e in self.entries]
        return label_proportions(labels)

    def trainable_indices(self) -> list:
        return [i for i, e in enumerate(self.entries) if not e.warmup and self.payloads[i] is not None]

    def to_csv(self, path) -> None:
        with self.lock, open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["insert_index", "g", "se", "g_bit", "se_bit", "category"])
            for e in self.entries:
                wr.writerow([e.insert_index, repr(e.g), repr(e.se), e.label.g_bit, e.label.se_bit,
                             e.label.category.label])


def pseudo_label(g: float, se: float, pool: ExploringPool) -> PurposeLabel:
    """Compare (G, S_e) against half-sample means of the pool; ties give 1."""
    g_thr, se_thr = pool.thresholds()
    return PurposeLabel(int(g >= g_thr), int(se >= se_thr))


def push(pool: ExploringPool, entry: PoolEntry) -> Optional[PoolEntry]:
    return pool.push(entry)


def label_proportions(history: Iterable) -> np.ndarray:
    """Fractions of (Breakout, Self-improvement, Hovering, Prospect)."""
    counts = np.zeros(len(Purpose), dtype=np.float64)
    n = 0
    for item in history:
        cat = item.category if isinstance(item, PurposeLabel) else Purpose(item)
        counts[cat] += 1
        n += 1
    if n == 0:
        raise ContractError("label_proportions needs a non-empty history")
    return counts / n


def bce_with_logits(logits, target, mode: str = "full") -> Tensor:
    """Binary cross entropy on the four purpose logits, summed over classes.

    ``mode="full"`` adds the (1 - y)·log(1 - σ(p)) complement for each class;
    ``mode="literal"`` keeps only -Σ y·log σ(p).  Accepts a single length-4
    vector or a batch [N, 4] (averaged over the batch).
    """
    x = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float32))
    y = np.asarray(target.one_hot() if isinstance(target, PurposeLabel) else target, dtype=x.dtype)
    if y.shape != x.shape:
        raise ValueError(f"target shape {y.shape} != logits shape {x.shape}")
    # -log σ(p) = softplus(-p);  -log(1 - σ(p)) = softplus(p)
    pos = T.mul(T.softplus(T.neg(x)), y)
    if mode == "full":
        per = T.add(pos, T.mul(T.softplus(x), 1.0 - y))
    elif mode == "literal":
        per = pos
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    if x.data.ndim == 1:
        return per.sum()
    return per.sum() * (1.0 / x.shape[0])
