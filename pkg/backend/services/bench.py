"""Latency microbenchmarks: cache add ops, prefill stride sweep, per-op ring cost."""
import logging
import time
from typing import Callable, List, Sequence, Tuple

import numpy as np

from ..models.schemas import AttentionParams, BenchRecord, BenchSection, CascadeConfig, PrefillConfig
from .cascade_cache import CascadeCache
from .prefill_driver import DeskModel, prefill
from .ring_store import CacheEntry, RingStore
from .workloads import SinkCacheReference

logger = logging.getLogger(__name__)


def summarize(samples: Sequence[float]) -> Tuple[float, float]:
    """Median and interquartile range of timing samples."""
    q1, median, q3 = np.percentile(np.asarray(samples, dtype=np.float64), [25, 50, 75])
    return float(median), float(q3 - q1)


def time_runs(run: Callable[[], float], runs: int, warmup: int) -> List[float]:
    """Call ``run`` warmup + runs times; each call returns its own measured seconds."""
    for _ in range(warmup):
        run()
    return [run() for _ in range(runs)]


def _entries(tokens: int, dim: int, seed: int) -> List[CacheEntry]:
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((tokens, dim)).astype(np.float32)
    values = rng.standard_normal((tokens, dim)).astype(np.float32)
    return [CacheEntry(key=keys[i], value=values[i], score=0.0, origin_pos=i) for i in range(tokens)]


def _cumulative_add_time(make_cache: Callable[[], object], entries: Sequence[CacheEntry]) -> Callable[[], float]:
    def run() -> float:
        cache = make_cache()
        total = 0.0
        for entry in entries:
            start = time.perf_counter()
            cache.add_token(entry)
            total += time.perf_counter() - start
        return total

    return run


def bench_cache_ops(section: BenchSection, seed: int = 0) -> List[BenchRecord]:
    """Cumulative add_token time for ring cascades (N=1, N=4) and the concatenation baseline."""
    entries = _entries(section.tokens, section.dim, seed)
    variants = [
        ("ring_n1", 1, lambda: CascadeCache(_bench_config(section, 1), (section.dim,))),
        ("ring_n4", 4, lambda: CascadeCache(_bench_config(section, 4), (section.dim,))),
        ("concat", 1, lambda: SinkCacheReference(section.capacity, section.sink_size, (section.dim,))),
    ]
    records = []
    for name, cascades, make_cache in variants:
        samples = time_runs(_cumulative_add_time(make_cache, entries), section.runs, section.warmup)
        median, iqr = summarize(samples)
        records.append(
            BenchRecord(
                benchmark="cache_ops",
                variant=name,
                capacity=section.capacity,
                cascades=cascades,
                stride=0,
                tokens=section.tokens,
                runs=section.runs,
                median_s=median,
                iqr_s=iqr,
                per_op_s=median / section.tokens,
            )
        )
        logger.info("cache_ops %s: median %.4fs (IQR %.4fs)", name, median, iqr)
    return records


def _bench_config(section: BenchSection, cascades: int) -> CascadeConfig:
    return CascadeConfig(
        total_capacity=section.capacity,
        num_cascades=cascades,
        sink_size=section.sink_size,
        selection_enabled=False,
    )


def bench_ring_ops(section: BenchSection, capacities: Sequence[int] = (16, 16384), seed: int = 0) -> List[BenchRecord]:
    """Per-op push_overwrite cost on a full ring at small and large capacity."""
    entries = _entries(section.tokens, section.dim, seed)
    records = []
    for capacity in capacities:

        def run(capacity: int = capacity) -> float:
            store = RingStore(capacity, (section.dim,))
            for entry in entries[:capacity]:
                store.push_overwrite(entry)
            start = time.perf_counter()
            for entry in entries:
                store.push_overwrite(entry)
            return time.perf_counter() - start

        median, iqr = summarize(time_runs(run, section.runs, section.warmup))
        records.append(
            BenchRecord(
                benchmark="ring_op",
                variant=f"ring_cap{capacity}",
                capacity=capacity,
                cascades=1,
                stride=0,
                tokens=len(entries),
                runs=section.runs,
                median_s=median,
                iqr_s=iqr,
                per_op_s=median / len(entries),
            )
        )
    return records


def bench_prefill(section: BenchSection, attn: AttentionParams, seed: int = 0) -> List[BenchRecord]:
    """Prefill wall time over the stride sweep at a fixed sequence length."""
    cache_config = CascadeConfig(total_capacity=section.prefill_capacity, num_cascades=4, sink_size=section.sink_size)
    model = DeskModel(attn, 1, seed)
    inputs = model.embed(section.seq_len, seed)
    records = []
    for stride in section.strides:
        config = PrefillConfig(stride=stride, layers=1, cache_config=cache_config, attn=attn, seed=seed)

        def run(config: PrefillConfig = config) -> float:
            start = time.perf_counter()
            prefill(config, inputs, model)
            return time.perf_counter() - start

        median, iqr = summarize(time_runs(run, section.runs, section.warmup))
        records.append(
            BenchRecord(
                benchmark="prefill",
                variant=f"stride{stride}",
                capacity=section.prefill_capacity,
                cascades=4,
                stride=stride,
                tokens=section.seq_len,
                runs=section.runs,
                median_s=median,
                iqr_s=iqr,
                per_op_s=median / section.seq_len,
            )
        )
        logger.info("prefill stride %d: median %.3fs (IQR %.3fs)", stride, median, iqr)
    return records


def run_benchmarks(section: BenchSection, attn: AttentionParams, seed: int = 0) -> List[BenchRecord]:
    return bench_cache_ops(section, seed) + bench_ring_ops(section, seed=seed) + bench_prefill(section, attn, seed)
