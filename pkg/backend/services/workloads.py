"""Synthetic streams, baseline policies, retention replays and mask reconstruction.

Replays feed injected attention distributions instead of attention-derived
scores: each step the stream's newest query spreads a normalized distribution
over the current residents, then the new token is added with score 0.
"""
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..models.errors import ConfigError, IncompleteTraceError
from ..models.schemas import (
    CascadeConfig,
    MarkedToken,
    PolicyKind,
    RetentionRecord,
    RetentionReport,
    ScoreProfile,
    SyntheticStream,
)
from .cascade_cache import (
    SINK_INDEX,
    CascadeCache,
    EventKind,
    EvictionTrace,
    StoreFactory,
    TraceEvent,
    expected_retrieval_accuracy,
    sparsity,
    token_span,
)
from .ring_store import CacheEntry, RingStore

logger = logging.getLogger(__name__)


class SinkCacheReference:
    """Sink tokens plus a sliding window kept as arrays rebuilt on every add.

    Emits the same event stream as a single-cascade ``CascadeCache``.
    """

    def __init__(self, capacity: int, sink_size: int, entry_shape: Tuple[int, ...] = (1,), dtype=np.float32):
        if capacity < 1 or sink_size < 0:
            raise ConfigError(f"invalid sink cache sizes: capacity={capacity} sink_size={sink_size}")
        self.capacity = capacity
        self.sink_size = sink_size
        self.entry_shape = tuple(entry_shape)
        self.sink_keys = np.zeros((0, *self.entry_shape), dtype=dtype)
        self.sink_values = np.zeros((0, *self.entry_shape), dtype=dtype)
        self.keys = np.zeros((0, *self.entry_shape), dtype=dtype)
        self.values = np.zeros((0, *self.entry_shape), dtype=dtype)
        self.sink_positions: List[int] = []
        self.positions: List[int] = []
        self.step = 0
        self.trace = EvictionTrace(sink_size=sink_size)

    def add_token(self, entry: CacheEntry) -> List[TraceEvent]:
        key = np.asarray(entry.key)[None]
        value = np.asarray(entry.value)[None]
        if len(self.sink_positions) < self.sink_size:
            self.sink_keys = np.concatenate([self.sink_keys, key])
            self.sink_values = np.concatenate([self.sink_values, value])
            self.sink_positions.append(entry.origin_pos)
            events = [TraceEvent(self.step, EventKind.SINK_ADD, entry.origin_pos, SINK_INDEX)]
            self.trace.extend(events)
            return events

        start = 1 if len(self.positions) == self.capacity else 0
        self.keys = np.concatenate([self.keys[start:], key])
        self.values = np.concatenate([self.values[start:], value])
        events = [TraceEvent(self.step, EventKind.ACCEPT, entry.origin_pos, 1)]
        self.positions.append(entry.origin_pos)
        if start:
            dropped = self.positions.pop(0)
            events.append(TraceEvent(self.step, EventKind.CASCADE_EVICT, dropped, 1))
            events.append(TraceEvent(self.step, EventKind.FINAL_DISCARD, dropped, 1))
        self.step += 1
        self.trace.extend(events)
        return events

    @property
    def sink_count(self) -> int:
        return len(self.sink_positions)

    def resident_count(self) -> int:
        return len(self.sink_positions) + len(self.positions)

    def resident_positions(self) -> np.ndarray:
        return np.array(self.sink_positions + self.positions, dtype=np.int64)

    def final_location(self, origin_pos: int) -> Optional[int]:
        if origin_pos in self.sink_positions:
            return SINK_INDEX
        if origin_pos in self.positions:
            return 1
        return None


PolicyCache = Union[CascadeCache, SinkCacheReference]


def effective_config(policy: PolicyKind, config: CascadeConfig) -> CascadeConfig:
    """Cache configuration a policy actually runs with."""
    if policy == PolicyKind.SLIDING_WINDOW:
        return config.model_copy(update={"num_cascades": 1, "sink_size": 0, "selection_enabled": False})
    if policy == PolicyKind.STREAMING_LLM_SINK:
        return config.model_copy(update={"num_cascades": 1, "selection_enabled": False})
    if policy == PolicyKind.CASCADE_NO_SELECTION:
        return config.model_copy(update={"selection_enabled": False})
    return config.model_copy(update={"selection_enabled": True})


def build_policy_cache(
    policy: PolicyKind,
    config: CascadeConfig,
    entry_shape: Tuple[int, ...] = (1,),
    store_factory: StoreFactory = RingStore,
) -> PolicyCache:
    effective = effective_config(policy, config)
    if policy == PolicyKind.STREAMING_LLM_SINK:
        return SinkCacheReference(effective.total_capacity, effective.sink_size, entry_shape)
    return CascadeCache(effective, entry_shape, store_factory=store_factory)


def uses_scores(policy: PolicyKind) -> bool:
    return policy == PolicyKind.CASCADE_FULL


def _token_weights(stream: SyntheticStream) -> np.ndarray:
    weights = np.ones(stream.length, dtype=np.float64)
    for mark in stream.marked:
        weights[mark.pos] = mark.weight
    return weights


def _inject_scores(cache: CascadeCache, weights: Optional[np.ndarray], rng: np.random.Generator) -> None:
    """One query step: a normalized distribution over residents folded into the EMA."""
    stores = [s for s in cache.positional_stores() if len(s)]
    if not stores:
        return
    slots = [s.logical_slots() for s in stores]
    if weights is None:
        raw = [rng.random(len(sl)) for sl in slots]
    else:
        raw = [weights[s.origins[sl]] for s, sl in zip(stores, slots)]
    total = float(sum(r.sum() for r in raw))
    if total <= 0.0:
        return
    gamma = cache.config.ema_gamma
    scale = (1.0 - gamma) / total
    for store, sl, r in zip(stores, slots, raw):
        store.scores[sl] = gamma * store.scores[sl] + scale * r


def _replay(
    policy: PolicyKind,
    config: CascadeConfig,
    stream: SyntheticStream,
    store_factory: StoreFactory = RingStore,
) -> PolicyCache:
    cache = build_policy_cache(policy, config, store_factory=store_factory)
    scored = uses_scores(policy)
    weights = None if stream.score_profile == ScoreProfile.UNIFORM_RANDOM else _token_weights(stream)
    rng = np.random.default_rng(stream.seed)
    blank = np.zeros(1, dtype=np.float32)
    for pos in range(stream.length):
        if scored:
            _inject_scores(cache, weights, rng)
        cache.add_token(CacheEntry(key=blank, value=blank, score=0.0, origin_pos=pos))
    return cache


def replay_trace(policy: PolicyKind, config: CascadeConfig, stream: SyntheticStream) -> EvictionTrace:
    """Eviction trace of ``stream`` replayed through ``policy``."""
    return _replay(policy, config, stream).trace


def _discard_positions(trace: EvictionTrace) -> Dict[int, int]:
    """origin_pos -> stream position whose insertion discarded it."""
    return {
        e.origin_pos: trace.sink_size + e.step
        for e in trace
        if e.kind == EventKind.FINAL_DISCARD
    }


def run_retention(
    policy: PolicyKind,
    config: CascadeConfig,
    stream: SyntheticStream,
    store_factory: StoreFactory = RingStore,
) -> RetentionReport:
    """Replay ``stream`` and report the fate of every marked token."""
    effective = effective_config(policy, config)
    capacity = effective.total_capacity + effective.sink_size
    if stream.length < capacity:
        logger.warning("stream of %d tokens never fills a %d-token cache", stream.length, capacity)
    cache = _replay(policy, config, stream, store_factory)

    positions = cache.resident_positions()
    resident = set(int(p) for p in positions)
    discarded = _discard_positions(cache.trace)
    records = []
    for mark in stream.marked:
        kept = mark.pos in resident
        if kept:
            survival = stream.length - 1 - mark.pos
        else:
            survival = discarded[mark.pos] - mark.pos - 1
        records.append(
            RetentionRecord(
                policy=policy,
                num_cascades=effective.num_cascades,
                capacity=effective.total_capacity,
                seed=stream.seed,
                marked_pos=mark.pos,
                resident=kept,
                final_sub_cache=cache.final_location(mark.pos),
                survival_steps=survival,
                empirical_span=0,
            )
        )

    cascade_positions = positions[cache.sink_count :]
    span = int(cascade_positions[-1] - cascade_positions[0]) if len(cascade_positions) else 0
    for record in records:
        record.empirical_span = span
    if stream.length >= effective.total_capacity:
        overall, window = sparsity(effective, stream.length)
    else:
        overall, window = 0.0, 1.0 - effective.total_capacity / token_span(effective)

    return RetentionReport(
        policy=policy,
        config=effective,
        stream_length=stream.length,
        records=records,
        resident_count=len(positions),
        empirical_span=span,
        token_span=token_span(effective),
        overall_sparsity=overall,
        window_sparsity=window,
    )


def reconstruct_mask(trace: EvictionTrace, seq_len: int, stride: int = 1) -> np.ndarray:
    """Boolean [S, S] mask of which keys each query saw.

    Query i runs in the chunk starting at ``(i // stride) * stride`` against
    the cache state before that chunk plus the chunk itself (causally).
    """
    if seq_len < 1 or stride < 1:
        raise ConfigError(f"seq_len and stride must be positive, got {seq_len} and {stride}")
    seen = trace.tokens_seen()
    if seen < seq_len:
        raise IncompleteTraceError(f"trace covers {seen} tokens, {seq_len} requested")

    removal_at = np.full(seq_len, np.iinfo(np.int64).max, dtype=np.int64)
    for pos, at in _discard_positions(trace).items():
        if pos < seq_len:
            removal_at[pos] = at
    rows = np.arange(seq_len)
    chunk_start = (rows // stride) * stride
    cols = rows[None, :]
    alive = (cols >= chunk_start[:, None]) | (removal_at[None, :] >= chunk_start[:, None])
    return (cols <= rows[:, None]) & alive


def row_nonzeros(mask: np.ndarray) -> np.ndarray:
    return mask.sum(axis=1)


def oldest_reach(mask: np.ndarray, sink_size: int) -> np.ndarray:
    """Per row, distance from the query to its oldest attended non-sink column."""
    rows = np.arange(mask.shape[0])
    body = mask[:, sink_size:]
    has_any = body.any(axis=1)
    first = np.where(has_any, body.argmax(axis=1) + sink_size, rows)
    return rows - first


def naive_cascade_residents(config: CascadeConfig, length: int) -> Tuple[List[int], List[List[int]], List[int]]:
    """List-based replay of the selection-free cascade pattern.

    Returns (sink, sub-caches oldest to newest, discarded positions in order).
    """
    sub_capacity = config.sub_capacity
    sink: List[int] = []
    subs: List[List[int]] = [[] for _ in range(config.num_cascades)]
    discarded: List[int] = []
    step = 0
    for pos in range(length):
        if len(sink) < config.sink_size:
            sink.append(pos)
            continue
        carried: Optional[int] = pos
        for i, sub in enumerate(subs):
            if step % (2**i) == 0:
                sub.append(carried)
                carried = sub.pop(0) if len(sub) > sub_capacity else None
                if carried is None:
                    break
            elif len(sub) < sub_capacity:
                sub.append(carried)
                carried = None
                break
            else:
                discarded.append(carried)
                carried = None
                break
        if carried is not None:
            discarded.append(carried)
        step += 1
    return sink, subs, discarded


def single_heavy_stream(length: int, pos: int, weight: float, seed: int = 0) -> SyntheticStream:
    return SyntheticStream(
        length=length,
        score_profile=ScoreProfile.SINGLE_HEAVY,
        marked=[MarkedToken(pos=pos, weight=weight)],
        seed=seed,
    )


def marked_positions(context: int, seeds: int, base_seed: int = 0) -> List[int]:
    """One uniformly placed marked position per seed, shared by every grid point."""
    return [int(np.random.default_rng(base_seed + s).integers(0, context)) for s in range(seeds)]


def _grid_point(args) -> Tuple[Dict, List[RetentionRecord]]:
    policy, config, context, positions, weight, base_seed = args
    records: List[RetentionRecord] = []
    for s, pos in enumerate(positions):
        stream = single_heavy_stream(context, pos, weight, seed=base_seed + s)
        records.extend(run_retention(policy, config, stream).records)
    effective = effective_config(policy, config)
    span = token_span(effective)
    row = {
        "policy": policy.value,
        "N": effective.num_cascades,
        "capacity": effective.total_capacity,
        "context": context,
        "seeds": len(positions),
        "retention": sum(r.resident for r in records) / len(records),
        "token_span": span,
        "expected_accuracy": expected_retrieval_accuracy(span, context),
    }
    return row, records


def retention_curve(
    base: CascadeConfig,
    policies: Sequence[PolicyKind],
    cascades: Sequence[int],
    contexts: Sequence[int],
    seeds: int,
    weight: float = 1000.0,
    base_seed: int = 0,
    workers: int = 1,
) -> Tuple[List[Dict], List[RetentionRecord]]:
    """Average marked-token retention over a policy x N x context grid.

    Marked positions depend only on (context, seed), so every N and policy is
    scored on the same insertion points.
    """
    jobs = []
    for context in contexts:
        positions = marked_positions(context, seeds, base_seed)
        for policy in policies:
            for n in cascades:
                config = CascadeConfig.model_validate({**base.model_dump(), "num_cascades": n})
                jobs.append((policy, config, context, positions, weight, base_seed))
    logger.info("retention grid: %d points x %d seeds", len(jobs), seeds)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_grid_point, jobs))
    else:
        results = [_grid_point(job) for job in jobs]
    rows = [row for row, _ in results]
    records = [record for _, recs in results for record in recs]
    return rows, records


def resident_by_position(policy: PolicyKind, config: CascadeConfig, context: int) -> np.ndarray:
    """Per stream position, whether a score-free policy still holds it at the end."""
    if uses_scores(policy):
        raise ConfigError(f"{policy.value} retention depends on scores; replay each marked stream instead")
    cache = _replay(policy, config, SyntheticStream(length=context))
    kept = np.zeros(context, dtype=bool)
    kept[cache.resident_positions()] = True
    return kept


def baseline_ordering(
    config: CascadeConfig,
    context: int,
    positions: Sequence[int],
    weight: float = 1000.0,
    base_seed: int = 0,
) -> Dict[str, float]:
    """Retention of a uniformly placed marked token for the three baselines.

    Score-free policies are averaged over every position of the context. The
    cascade with selection is replayed once per sampled position and compared
    with the selection-free cascade on those same positions.
    """
    sliding = resident_by_position(PolicyKind.SLIDING_WINDOW, config, context)
    plain = resident_by_position(PolicyKind.CASCADE_NO_SELECTION, config, context)
    full = [
        run_retention(PolicyKind.CASCADE_FULL, config, single_heavy_stream(context, pos, weight, seed=base_seed + s))
        .records[0]
        .resident
        for s, pos in enumerate(positions)
    ]
    return {
        "sliding_window": float(sliding.mean()),
        "cascade_no_selection": float(plain.mean()),
        "cascade_no_selection_sampled": float(plain[list(positions)].mean()),
        "cascade_full_sampled": float(np.mean(full)),
    }


RETENTION_CSV_FIELDS = ("policy", "N", "capacity", "seed", "marked_pos", "resident", "survival_steps", "empirical_span")
CURVE_CSV_FIELDS = ("policy", "N", "capacity", "context", "seeds", "retention", "token_span", "expected_accuracy")


def _write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_retention_csv(records: Iterable[RetentionRecord], path) -> Path:
    return _write_rows(
        path,
        RETENTION_CSV_FIELDS,
        (
            (r.policy.value, r.num_cascades, r.capacity, r.seed, r.marked_pos, int(r.resident), r.survival_steps, r.empirical_span)
            for r in records
        ),
    )


def write_curve_csv(rows: Iterable[Dict], path) -> Path:
    return _write_rows(
        path,
        CURVE_CSV_FIELDS,
        ([row[f] if not isinstance(row[f], float) else f"{row[f]:.6f}" for f in CURVE_CSV_FIELDS] for row in rows),
    )
