"""Cascading KV cache: sink buffer plus sub-caches with thinning acceptance.

Sub-cache i (1-indexed) accepts an offered token only on global steps where
``step % 2**(i-1) == 0``. A token evicted from a full accepting sub-cache is
offered to the next one; at a full non-accepting sub-cache the offered token
competes with that sub-cache's newest token on EMA score. The step counter
starts at 0 on the first post-sink insertion and ticks once per add_token.
"""
import csv
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from ..models.errors import (
    ConfigError,
    InvalidEntryError,
    NumericError,
    OrderingError,
    ScoreAlignmentError,
    UndefinedSparsityError,
)
from ..models.schemas import AttentionParams, CascadeConfig, HeadPolicy
from .ring_store import CacheEntry, RingStore

logger = logging.getLogger(__name__)

StoreFactory = Callable[..., RingStore]

SINK_INDEX = 0


class EventKind(str, Enum):
    SINK_ADD = "sink_add"
    ACCEPT = "accept"
    CASCADE_EVICT = "cascade_evict"
    SELECTION_KEEP_INCOMING = "selection_keep_incoming"
    SELECTION_KEEP_RESIDENT = "selection_keep_resident"
    FINAL_DISCARD = "final_discard"


class TraceEvent(NamedTuple):
    step: int
    kind: EventKind
    origin_pos: int
    sub_cache: int


class EvictionTrace:
    """Time-ordered log of cache events.

    ``sink_size`` maps a post-sink event step back to the stream position of
    the token whose insertion caused it (``sink_size + step``) for streams that
    start at position 0.
    """

    CSV_HEADER = ("step", "kind", "origin_pos", "sub_cache")

    def __init__(self, sink_size: int = 0, events: Optional[List[TraceEvent]] = None):
        self.sink_size = sink_size
        self.events: List[TraceEvent] = list(events or [])

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def extend(self, events: Sequence[TraceEvent]) -> None:
        self.events.extend(events)

    def tokens_seen(self) -> int:
        """Number of distinct insertions the trace records."""
        return sum(
            1
            for e in self.events
            if e.kind == EventKind.SINK_ADD or (e.kind == EventKind.ACCEPT and e.sub_cache == 1)
        )

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.CSV_HEADER)
            for event in self.events:
                writer.writerow((event.step, event.kind.value, event.origin_pos, event.sub_cache))
        return path

    @classmethod
    def from_csv(cls, path, sink_size: int = 0) -> "EvictionTrace":
        with open(path, "r", newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            events = [
                TraceEvent(int(row["step"]), EventKind(row["kind"]), int(row["origin_pos"]), int(row["sub_cache"]))
                for row in reader
            ]
        return cls(sink_size=sink_size, events=events)


def accepts_on(cascade_index: int, step: int) -> bool:
    """Whether sub-cache ``cascade_index`` accepts offered tokens at ``step``."""
    if cascade_index < 1:
        raise ConfigError(f"cascade index is 1-based, got {cascade_index}")
    return step % (1 << (cascade_index - 1)) == 0


def token_span(config: CascadeConfig) -> int:
    """Stream distance covered by a full cache: |C|/N * sum(2**(i-1))."""
    return config.sub_capacity * ((1 << config.num_cascades) - 1)


def sparsity(config: CascadeConfig, seq_len: int) -> Tuple[float, float]:
    """Overall sparsity ``1 - |C|/S`` and window sparsity ``1 - |C|/S~``."""
    if seq_len < config.total_capacity:
        raise UndefinedSparsityError(
            f"sequence length {seq_len} is shorter than the cache capacity {config.total_capacity}"
        )
    capacity = config.total_capacity
    return 1.0 - capacity / seq_len, 1.0 - capacity / token_span(config)


def expected_retrieval_accuracy(span: int, context_len: int) -> float:
    """Chance a uniformly placed key lies inside the span."""
    if span <= 0 or context_len <= 0:
        raise ConfigError("span and context length must be positive")
    return min(1.0, span / context_len)


def lossless_prefix(config: CascadeConfig) -> int:
    """Tokens a fresh cache absorbs before its first removal.

    Once C_2 is full it drops every token offered on an odd step, so for
    N >= 3 removals start before the sub-caches are all full.
    """
    return config.sink_size + min(config.total_capacity, 2 * config.sub_capacity + 1)


def gamma_for_window(window: int) -> float:
    """EMA factor under which a score decays to 1% over ``window`` steps."""
    if window <= 0:
        raise ConfigError(f"window must be positive, got {window}")
    return math.exp(-math.log(100.0) / window)


class CascadeCache:
    """Sink buffer plus N equally sized ring sub-caches for one decision unit."""

    def __init__(
        self,
        config: CascadeConfig,
        entry_shape: Tuple[int, ...] = (1,),
        dtype=np.float32,
        store_factory: StoreFactory = RingStore,
    ):
        self.config = config
        self.entry_shape = tuple(entry_shape)
        self.sink: Optional[RingStore] = (
            store_factory(config.sink_size, self.entry_shape, dtype) if config.sink_size > 0 else None
        )
        self.sub_caches: List[RingStore] = [
            store_factory(config.sub_capacity, self.entry_shape, dtype) for _ in range(config.num_cascades)
        ]
        self.step = 0
        self.last_pos = -1
        self.trace = EvictionTrace(sink_size=config.sink_size)
        self._overflowed = False

    def __repr__(self) -> str:
        counts = [len(s) for s in self.sub_caches]
        return f"CascadeCache(sink={self.sink_count}, sub_caches={counts}, step={self.step})"

    @property
    def sink_count(self) -> int:
        return len(self.sink) if self.sink is not None else 0

    def resident_count(self) -> int:
        return self.sink_count + sum(len(s) for s in self.sub_caches)

    def positional_stores(self) -> List[RingStore]:
        """Stores ordered oldest content first: sink, then C_N down to C_1."""
        stores = [self.sink] if self.sink is not None else []
        return stores + self.sub_caches[::-1]

    def add_token(self, entry: CacheEntry) -> List[TraceEvent]:
        """Offer one token to the cache, cascading evictions downstream."""
        if np.shape(entry.key) != self.entry_shape or np.shape(entry.value) != self.entry_shape:
            raise InvalidEntryError(
                f"entry shape {np.shape(entry.key)} does not match cache entry shape {self.entry_shape}"
            )
        if entry.origin_pos <= self.last_pos:
            raise OrderingError(f"origin_pos {entry.origin_pos} does not follow newest resident {self.last_pos}")
        self.last_pos = entry.origin_pos

        step = self.step
        events: List[TraceEvent] = []
        if self.sink is not None and not self.sink.is_full():
            self.sink.push_overwrite(entry)
            events.append(TraceEvent(step, EventKind.SINK_ADD, entry.origin_pos, SINK_INDEX))
            self.trace.extend(events)
            return events

        carried: Optional[CacheEntry] = entry
        for index, store in enumerate(self.sub_caches, start=1):
            if accepts_on(index, step):
                events.append(TraceEvent(step, EventKind.ACCEPT, carried.origin_pos, index))
                carried = store.push_overwrite(carried)
                if carried is None:
                    break
                events.append(TraceEvent(step, EventKind.CASCADE_EVICT, carried.origin_pos, index))
            elif not store.is_full():
                # eager add to an unfilled sub-cache instead of discarding
                store.push_overwrite(carried)
                events.append(TraceEvent(step, EventKind.ACCEPT, carried.origin_pos, index))
                carried = None
                break
            else:
                self._select(store, index, carried, step, events)
                carried = None
                break

        if carried is not None:
            events.append(TraceEvent(step, EventKind.FINAL_DISCARD, carried.origin_pos, self.config.num_cascades))
            if not self._overflowed:
                self._overflowed = True
                logger.debug("cache full: tokens now fall off the last cascade (first at pos %d)", carried.origin_pos)

        self.step += 1
        self.trace.extend(events)
        return events

    def _select(self, store: RingStore, index: int, carried: CacheEntry, step: int, events: List[TraceEvent]) -> None:
        if not self.config.selection_enabled:
            events.append(TraceEvent(step, EventKind.FINAL_DISCARD, carried.origin_pos, index))
            return
        resident_score, resident_pos = store.newest_meta()
        # ties keep the resident token
        if carried.score > resident_score:
            store.evict_newest()
            store.push_overwrite(carried)
            events.append(TraceEvent(step, EventKind.SELECTION_KEEP_INCOMING, carried.origin_pos, index))
            events.append(TraceEvent(step, EventKind.FINAL_DISCARD, resident_pos, index))
        else:
            events.append(TraceEvent(step, EventKind.SELECTION_KEEP_RESIDENT, resident_pos, index))
            events.append(TraceEvent(step, EventKind.FINAL_DISCARD, carried.origin_pos, index))

    def resident_positions(self) -> np.ndarray:
        """Origin positions in positional (ascending) order."""
        parts = [store.origin_positions() for store in self.positional_stores()]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def resident_scores(self) -> np.ndarray:
        parts = [store.scores[store.logical_slots()] for store in self.positional_stores()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def resident_keys(self) -> np.ndarray:
        return np.concatenate([store.keys[store.logical_slots()] for store in self.positional_stores()])

    def resident_values(self) -> np.ndarray:
        return np.concatenate([store.values[store.logical_slots()] for store in self.positional_stores()])

    def positional_indices(self) -> List[Tuple[int, int]]:
        """(origin_pos, pe_index) with pe indices assigned by rank inside the cache."""
        return [(int(pos), rank) for rank, pos in enumerate(self.resident_positions())]

    def fold_scores(self, decay: float, contributions: np.ndarray) -> None:
        """mu <- decay * mu + contribution, contributions in positional order."""
        contributions = np.asarray(contributions, dtype=np.float64)
        if contributions.shape != (self.resident_count(),):
            raise ScoreAlignmentError(
                f"expected {self.resident_count()} contributions, got shape {contributions.shape}"
            )
        if not np.all(np.isfinite(contributions)) or np.any(contributions < 0):
            raise NumericError("score contributions must be finite and non-negative")
        offset = 0
        for store in self.positional_stores():
            slots = store.logical_slots()
            n = len(slots)
            store.scores[slots] = decay * store.scores[slots] + contributions[offset : offset + n]
            offset += n

    def update_scores_aligned(self, scores: np.ndarray) -> None:
        gamma = self.config.ema_gamma
        self.fold_scores(gamma, (1.0 - gamma) * np.asarray(scores, dtype=np.float64))

    def update_scores(self, scores: Mapping[int, float]) -> None:
        """EMA update keyed by origin position; must cover exactly the residents."""
        positions = self.resident_positions()
        resident = set(int(p) for p in positions)
        given = set(int(p) for p in scores)
        if given != resident:
            missing = sorted(resident - given)[:5]
            extra = sorted(given - resident)[:5]
            raise ScoreAlignmentError(f"score keys do not match residents (missing {missing}, extra {extra})")
        self.update_scores_aligned(np.array([scores[int(p)] for p in positions], dtype=np.float64))

    def final_location(self, origin_pos: int) -> Optional[int]:
        """0 for the sink, 1..N for a sub-cache, None when not resident."""
        for index, store in enumerate([self.sink] + self.sub_caches):
            if store is not None and origin_pos in store.origin_positions():
                return index
        return None


class LayerKVCache:
    """Per-layer cache set: one unit for homogeneous heads, one per KV head otherwise."""

    def __init__(
        self,
        config: CascadeConfig,
        attn: AttentionParams,
        dtype=np.float32,
        store_factory: StoreFactory = RingStore,
    ):
        self.config = config
        self.attn = attn
        if config.head_policy == HeadPolicy.HOMOGENEOUS:
            self.units = [CascadeCache(config, (attn.num_kv_heads, attn.dim), dtype, store_factory)]
        else:
            self.units = [CascadeCache(config, (attn.dim,), dtype, store_factory) for _ in range(attn.num_kv_heads)]

    @property
    def homogeneous(self) -> bool:
        return self.config.head_policy == HeadPolicy.HOMOGENEOUS

    @property
    def last_pos(self) -> int:
        return self.units[0].last_pos

    def unit_for_kv_head(self, kv_head: int) -> CascadeCache:
        return self.units[0] if self.homogeneous else self.units[kv_head]

    def kv_for_head(self, kv_head: int) -> Tuple[np.ndarray, np.ndarray]:
        """Resident keys/values of one KV head in positional order, shape [n, d]."""
        unit = self.unit_for_kv_head(kv_head)
        if unit.resident_count() == 0:
            empty = np.zeros((0, self.attn.dim))
            return empty, empty
        keys, values = unit.resident_keys(), unit.resident_values()
        if self.homogeneous:
            return keys[:, kv_head], values[:, kv_head]
        return keys, values

    def add_chunk(
        self,
        keys: np.ndarray,
        values: np.ndarray,
        positions: Sequence[int],
        unit_scores: Sequence[np.ndarray],
    ) -> List[List[TraceEvent]]:
        """Add a chunk of tokens in order; ``keys``/``values`` are [Hkv, m, d]."""
        events: List[List[TraceEvent]] = [[] for _ in self.units]
        for t, pos in enumerate(positions):
            for u, unit in enumerate(self.units):
                if self.homogeneous:
                    key, value = keys[:, t], values[:, t]
                else:
                    key, value = keys[u, t], values[u, t]
                entry = CacheEntry(key=key, value=value, score=float(unit_scores[u][t]), origin_pos=int(pos))
                events[u].extend(unit.add_token(entry))
        return events
