"""Fixed-capacity circular buffer of cached tokens.

Keys and values of every slot live in one pre-allocated block indexed by
slot; a ``CacheEntry`` is a detached copy of one slot. The occupied region is
a contiguous circular run that starts at the oldest slot, so ``xi`` (the next
write target) is ``(start + count) % capacity`` and equals the oldest slot
when the store is full.
"""
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from ..models.errors import ConfigError, EmptyStoreError, InvalidEntryError


@dataclass
class CacheEntry:
    """One cached token."""

    key: np.ndarray
    value: np.ndarray
    score: float
    origin_pos: int


class RingStore:
    """Circular buffer with O(1) insert-with-overwrite."""

    def __init__(self, capacity: int, entry_shape: Tuple[int, ...], dtype=np.float32):
        if capacity < 1:
            raise ConfigError(f"ring capacity must be positive, got {capacity}")
        if not entry_shape or any(dim < 1 for dim in entry_shape):
            raise ConfigError(f"entry shape must be non-empty and positive, got {entry_shape}")
        self.capacity = capacity
        self.entry_shape = tuple(entry_shape)
        self.keys = np.zeros((capacity, *self.entry_shape), dtype=dtype)
        self.values = np.zeros((capacity, *self.entry_shape), dtype=dtype)
        self.scores = np.zeros(capacity, dtype=np.float64)
        self.origins = np.full(capacity, -1, dtype=np.int64)
        self.start = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def __repr__(self) -> str:
        return f"RingStore(capacity={self.capacity}, count={self.count}, xi={self.xi})"

    @property
    def xi(self) -> int:
        return (self.start + self.count) % self.capacity

    def is_full(self) -> bool:
        return self.count == self.capacity

    def is_empty(self) -> bool:
        return self.count == 0

    def _newest_slot(self) -> int:
        return (self.start + self.count - 1) % self.capacity

    def _read(self, slot: int) -> CacheEntry:
        return CacheEntry(
            key=self.keys[slot].copy(),
            value=self.values[slot].copy(),
            score=float(self.scores[slot]),
            origin_pos=int(self.origins[slot]),
        )

    def _write(self, slot: int, entry: CacheEntry) -> None:
        self.keys[slot] = entry.key
        self.values[slot] = entry.value
        self.scores[slot] = entry.score
        self.origins[slot] = entry.origin_pos

    def _clear(self, slot: int) -> None:
        self.scores[slot] = 0.0
        self.origins[slot] = -1

    def _check(self, entry: CacheEntry) -> None:
        key_shape = np.shape(entry.key)
        if key_shape != self.entry_shape or np.shape(entry.value) != key_shape:
            raise InvalidEntryError(
                f"entry key/value shapes {key_shape}/{np.shape(entry.value)} do not match store shape {self.entry_shape}"
            )

    def push_overwrite(self, entry: CacheEntry) -> Optional[CacheEntry]:
        """Insert ``entry`` as newest; return the evicted oldest entry when full."""
        self._check(entry)
        if self.is_full():
            slot = self.start
            evicted = self._read(slot)
            self._write(slot, entry)
            self.start = (self.start + 1) % self.capacity
            return evicted
        self._write(self.xi, entry)
        self.count += 1
        return None

    def evict_newest(self) -> CacheEntry:
        if self.is_empty():
            raise EmptyStoreError("evict_newest on an empty store")
        slot = self._newest_slot()
        entry = self._read(slot)
        self._clear(slot)
        self.count -= 1
        if self.count == 0:
            self.start = 0
        return entry

    def evict_oldest(self) -> CacheEntry:
        if self.is_empty():
            raise EmptyStoreError("evict_oldest on an empty store")
        slot = self.start
        entry = self._read(slot)
        self._clear(slot)
        self.count -= 1
        self.start = 0 if self.count == 0 else (self.start + 1) % self.capacity
        return entry

    def peek_newest(self) -> Optional[CacheEntry]:
        if self.is_empty():
            return None
        return self._read(self._newest_slot())

    def newest_meta(self) -> Tuple[float, int]:
        """Score and origin position of the newest entry without copying its vectors."""
        if self.is_empty():
            raise EmptyStoreError("newest_meta on an empty store")
        slot = self._newest_slot()
        return float(self.scores[slot]), int(self.origins[slot])

    def logical_slots(self) -> np.ndarray:
        """Slot indices oldest to newest."""
        return (self.start + np.arange(self.count)) % self.capacity

    def iter_oldest_to_newest(self) -> Iterator[CacheEntry]:
        for slot in self.logical_slots():
            yield self._read(int(slot))

    def origin_positions(self) -> np.ndarray:
        return self.origins[self.logical_slots()]

    def entries(self) -> List[CacheEntry]:
        return list(self.iter_oldest_to_newest())


class SwappedEvictionRingStore(RingStore):
    """Fault-injection variant whose overwrite evicts the newest entry instead of the oldest."""

    def push_overwrite(self, entry: CacheEntry) -> Optional[CacheEntry]:
        self._check(entry)
        if self.is_full():
            evicted = self.evict_newest()
            super().push_overwrite(entry)
            return evicted
        return super().push_overwrite(entry)
