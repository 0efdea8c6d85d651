"""Oracle verification suite for the cache, attention and prefill stack."""
import logging
from collections import deque
from typing import Callable, List, Optional

import numpy as np

from ..models.schemas import (
    AttentionParams,
    CascadeConfig,
    HeadPolicy,
    HeadReduction,
    PolicyKind,
    PrefillConfig,
    RunConfig,
    SyntheticStream,
    VerificationCheck,
    VerificationReport,
)
from .attention_core import chunk_attend, sequential_score_oracle
from .cascade_cache import (
    CascadeCache,
    EventKind,
    LayerKVCache,
    lossless_prefix,
    token_span,
)
from .prefill_driver import DeskModel, dense_reference, prefill
from .ring_store import CacheEntry, RingStore, SwappedEvictionRingStore
from .workloads import (
    SinkCacheReference,
    baseline_ordering,
    marked_positions,
    naive_cascade_residents,
    oldest_reach,
    reconstruct_mask,
    replay_trace,
    retention_curve,
    row_nonzeros,
    run_retention,
    single_heavy_stream,
)

logger = logging.getLogger(__name__)

FAULTS = {"swap-evict": SwappedEvictionRingStore}

_BLANK = np.zeros(1, dtype=np.float32)


def _entry(pos: int, score: float = 0.0) -> CacheEntry:
    return CacheEntry(key=_BLANK, value=_BLANK, score=score, origin_pos=pos)


def _relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    expected = np.asarray(expected, dtype=np.float64)
    scale = max(float(np.max(np.abs(expected))), np.finfo(np.float64).tiny) if expected.size else 1.0
    return float(np.max(np.abs(np.asarray(actual, dtype=np.float64) - expected))) / scale if expected.size else 0.0


def _check(name: str, ok: bool, tolerance: str, details: str) -> VerificationCheck:
    return VerificationCheck(check_name=name, status="pass" if ok else "fail", tolerance=tolerance, details=details)


def _check_ring_replay(sequences: int, seed: int) -> VerificationCheck:
    """
    Check 1: Ring store against a deque model.

    Random push/evict_newest/evict_oldest sequences; contents, evicted entries
    and xi are compared after every operation.
    Status: pass (no divergence), fail (any divergence)
    """
    rng = np.random.default_rng(seed)
    for s in range(sequences):
        capacity = int(rng.integers(1, 17))
        store = RingStore(capacity, (1,))
        model: deque = deque()
        pos = 0
        for _ in range(int(rng.integers(1, 4 * capacity + 8))):
            op = rng.choice(["push", "push", "push", "newest", "oldest"])
            if op == "push":
                evicted = store.push_overwrite(_entry(pos))
                expected = model.popleft() if len(model) == capacity else None
                model.append(pos)
                pos += 1
                got = evicted.origin_pos if evicted is not None else None
            elif not model:
                continue
            elif op == "newest":
                got, expected = store.evict_newest().origin_pos, model.pop()
            else:
                got, expected = store.evict_oldest().origin_pos, model.popleft()
            if got != expected or list(store.origin_positions()) != list(model):
                return _check(
                    "Ring store replay",
                    False,
                    "exact",
                    f"sequence {s} (capacity {capacity}) diverged after {op}: got {got}, expected {expected}",
                )
            if store.is_full() and store.xi != store.start:
                return _check("Ring store replay", False, "exact", f"sequence {s}: xi does not point at the oldest slot")
    return _check("Ring store replay", True, "exact", f"{sequences} random operation sequences matched the deque model")


def _check_sink_equivalence(streams: int, capacity: int, seed: int, fault: Optional[str]) -> VerificationCheck:
    """
    Check 2: A single-cascade cache without selection emits exactly the
    reference sink cache's event stream.

    Status: pass (all streams identical), fail (first mismatching event)
    """
    store_factory = FAULTS.get(fault, RingStore)
    rng = np.random.default_rng(seed)
    for s in range(streams):
        sink = int(rng.integers(0, 4))
        length = int(rng.integers(1, 10 * capacity + 1))
        config = CascadeConfig(total_capacity=capacity, num_cascades=1, sink_size=sink, selection_enabled=False)
        cascade = CascadeCache(config, store_factory=store_factory)
        reference = SinkCacheReference(capacity, sink)
        for pos in range(length):
            cascade.add_token(_entry(pos))
            reference.add_token(_entry(pos))
        if cascade.trace.events != reference.trace.events:
            mismatch = next(
                (i for i, (a, b) in enumerate(zip(cascade.trace.events, reference.trace.events)) if a != b),
                min(len(cascade.trace), len(reference.trace)),
            )
            return _check(
                "Single-cascade equivalence",
                False,
                "exact",
                f"stream {s} (length {length}, sink {sink}) differs at event {mismatch}",
            )
    detail = f"{streams} streams of length <= {10 * capacity} produced identical event streams"
    if fault:
        detail += f" (fault '{fault}' injected)"
    return _check("Single-cascade equivalence", True, "exact", detail)


def _check_naive_pattern(seed: int, instances: int = 200) -> VerificationCheck:
    """
    Check 3: Selection-free cascade against a list-based simulator.

    Status: pass (identical sub-cache contents and discard order), fail
    """
    rng = np.random.default_rng(seed)
    for s in range(instances):
        n = int(rng.integers(1, 5))
        config = CascadeConfig(
            total_capacity=n * int(rng.integers(1, 5)),
            num_cascades=n,
            sink_size=int(rng.integers(0, 3)),
            selection_enabled=False,
        )
        length = int(rng.integers(1, 200))
        cache = CascadeCache(config)
        for pos in range(length):
            cache.add_token(_entry(pos))
        sink, subs, discarded = naive_cascade_residents(config, length)
        got_subs = [list(store.origin_positions()) for store in cache.sub_caches]
        got_sink = list(cache.sink.origin_positions()) if cache.sink is not None else []
        got_discards = [e.origin_pos for e in cache.trace if e.kind == EventKind.FINAL_DISCARD]
        if got_subs != subs or got_sink != sink or got_discards != discarded:
            return _check(
                "Selection-free pattern",
                False,
                "exact",
                f"instance {s} (N={n}, |C|={config.total_capacity}, alpha={config.sink_size}, S={length}) diverged",
            )
    return _check("Selection-free pattern", True, "exact", f"{instances} random configurations matched the list simulator")


def _check_span(steps: int) -> VerificationCheck:
    """
    Check 4: Closed-form token span and the empirical oldest-resident distance.

    Status: pass (formula exact and distance within [span - 2**(N-1), span]), fail
    """
    config = CascadeConfig(total_capacity=4096, num_cascades=4, sink_size=0, selection_enabled=False)
    span = token_span(config)
    if span != 15360:
        return _check("Token span", False, "exact", f"token_span(4096, 4) = {span}, expected 15360")
    low = span - 2 ** (config.num_cascades - 1)
    cache = CascadeCache(config)
    distances = []
    for pos in range(steps):
        cache.add_token(_entry(pos))
        if pos >= 2 * span and pos % 997 == 0:
            positions = cache.resident_positions()
            distances.append(int(positions[-1] - positions[0]))
    if not distances:
        return _check("Token span", False, "exact", f"{steps} steps never reach steady state (need > {2 * span})")
    ok = all(low <= d <= span for d in distances)
    return _check(
        "Token span",
        ok,
        f"[{low}, {span}]",
        f"token_span = {span}; {len(distances)} samples of the oldest-resident distance in [{min(distances)}, {max(distances)}]",
    )


def _check_positional_indices() -> VerificationCheck:
    """
    Check 5: Residents are re-indexed by rank inside the cache.

    Status: pass (origin set {0,1,3,5,7,8} maps to pe 0..5), fail
    """
    config = CascadeConfig(total_capacity=8, num_cascades=2, sink_size=2)
    cache = CascadeCache(config)
    for pos in (0, 1, 3, 5, 7, 8):
        cache.add_token(_entry(pos))
    mapping = cache.positional_indices()
    expected = [(0, 0), (1, 1), (3, 2), (5, 3), (7, 4), (8, 5)]
    return _check("Positional re-indexing", mapping == expected, "exact", f"mapping {mapping}")


def _random_layer_cache(rng: np.random.Generator, attn: AttentionParams, config: CascadeConfig, n: int) -> LayerKVCache:
    cache = LayerKVCache(config, attn, dtype=np.float64)
    if n:
        keys = rng.standard_normal((attn.num_kv_heads, n, attn.dim))
        values = rng.standard_normal((attn.num_kv_heads, n, attn.dim))
        cache.add_chunk(keys, values, np.arange(n), [rng.random(n) for _ in cache.units])
    return cache


def _check_chunk_ema(instances: int, seed: int) -> VerificationCheck:
    """
    Check 6: Chunked score accumulation equals the per-row sequential EMA.

    Double precision, m <= 64 queries, up to 256 keys.
    Status: pass (relative error <= 1e-9 on every instance), fail
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        attn = AttentionParams(dim=8, num_q_heads=4, num_kv_heads=int(rng.choice([1, 2, 4])))
        config = CascadeConfig(
            total_capacity=192,
            num_cascades=4,
            sink_size=0,
            head_policy=HeadPolicy(rng.choice([p.value for p in HeadPolicy])),
            head_reduction=HeadReduction(rng.choice([r.value for r in HeadReduction])),
        )
        n = int(rng.integers(0, 193))
        m = int(rng.integers(1, 65))
        beta = float(rng.uniform(0.5, 0.999))
        cache = _random_layer_cache(rng, attn, config, n)
        q = rng.standard_normal((attn.num_q_heads, m, attn.dim))
        k = rng.standard_normal((attn.num_kv_heads, m, attn.dim))
        v = rng.standard_normal((attn.num_kv_heads, m, attn.dim))
        result = chunk_attend(attn, q, cache, k, v, beta, np.arange(n, n + m))
        resident_keys = [cache.kv_for_head(h)[0] for h in range(attn.num_kv_heads)]
        expected_res, expected_chunk = sequential_score_oracle(
            attn, q, resident_keys, k, beta, config.head_policy, config.head_reduction
        )
        for got, want in zip(result.resident_scores + result.chunk_scores, expected_res + expected_chunk):
            worst = max(worst, _relative_error(got, want))
    return _check(
        "Chunked vs sequential EMA",
        worst <= 1e-9,
        "1e-9 relative (float64)",
        f"{instances} instances, worst relative error {worst:.3e}",
    )


def _check_dense_equivalence(strict: bool, seed: int) -> VerificationCheck:
    """
    Check 7: Strided prefill equals dense attention before any removal.

    Strides {1, 7, S/2, S} with S the lossless prefix of the cache (all of
    alpha + |C| for N <= 2); outputs per layer, resident sets and scores are
    compared across strides.
    Status: pass (within tolerance), fail
    """
    precision = "float64" if strict else "float32"
    tolerance = 1e-9 if strict else 1e-5
    attn = AttentionParams(dim=8, num_q_heads=4, num_kv_heads=2)
    worst = 0.0
    lengths = []
    for cache_config in (
        CascadeConfig(total_capacity=60, num_cascades=2, sink_size=4),
        CascadeConfig(total_capacity=64, num_cascades=4, sink_size=4),
    ):
        seq_len = lossless_prefix(cache_config)
        lengths.append(seq_len)
        base = PrefillConfig(stride=1, layers=2, cache_config=cache_config, attn=attn, precision=precision, seed=seed)
        model = DeskModel(attn, base.layers, seed, np.dtype(precision))
        inputs = model.embed(seq_len, seed)
        reference = dense_reference(model, inputs)
        baseline = None
        for stride in (1, 7, seq_len // 2, seq_len):
            result = prefill(base.model_copy(update={"stride": stride}), inputs, model)
            for got, want in zip(result.layer_outputs, reference):
                worst = max(worst, _relative_error(got, want))
            residents = [[list(u.resident_positions()) for u in c.units] for c in result.caches]
            scores = [np.concatenate([u.resident_scores() for u in c.units]) for c in result.caches]
            if baseline is None:
                baseline = (residents, scores)
                continue
            if residents != baseline[0]:
                return _check(
                    "Dense equivalence",
                    False,
                    f"{tolerance:g}",
                    f"N={cache_config.num_cascades}: stride {stride} changed the resident sets",
                )
            for got, want in zip(scores, baseline[1]):
                worst = max(worst, _relative_error(got, want))
    return _check(
        "Dense equivalence",
        worst <= tolerance,
        f"{tolerance:g} relative ({precision})",
        f"S={lengths} for N=2 and N=4, worst relative error {worst:.3e} over outputs and scores",
    )


def _check_selection_ablation() -> VerificationCheck:
    """
    Check 8: Token selection keeps a heavy token that the fixed pattern drops.

    Status: pass (selection keeps every candidate, the fixed pattern drops
    some), fail
    """
    config = CascadeConfig(total_capacity=64, num_cascades=4, sink_size=4)
    span = token_span(config)
    length = 4 * span
    centre = length - span // 2
    kept_full, kept_plain = 0, 0
    candidates = range(centre - 8, centre + 9)
    for pos in candidates:
        stream = single_heavy_stream(length, pos, weight=1000.0)
        kept_full += run_retention(PolicyKind.CASCADE_FULL, config, stream).records[0].resident
        kept_plain += run_retention(PolicyKind.CASCADE_NO_SELECTION, config, stream).records[0].resident
    total = len(candidates)
    horizon = length - 1 - centre
    ok = kept_full == total and kept_plain < total and horizon > config.total_capacity
    return _check(
        "Selection ablation",
        ok,
        "exact",
        f"heavy tokens {horizon} steps old (FIFO horizon {config.total_capacity}): "
        f"selection kept {kept_full}/{total}, fixed pattern kept {kept_plain}/{total}",
    )


def _check_cascade_trend(config: RunConfig, quick: bool) -> VerificationCheck:
    """
    Check 9: Retention grows with the number of cascades up to N=8.

    Status: pass (non-decreasing over N in {1,2,4,8}, N=16 not above N=8, and
    the expected-accuracy column equal to min(1, span/context)), warning (only
    the N=16 point exceeds N=8), fail
    """
    capacity = 16 if quick else config.verify.retention_capacity
    seeds = 10 if quick else config.verify.retention_seeds
    base = CascadeConfig(total_capacity=capacity, num_cascades=8, sink_size=config.simulate.sink_size)
    context = 4 * token_span(base)
    rows, _ = retention_curve(
        base,
        [PolicyKind.CASCADE_FULL],
        [1, 2, 4, 8, 16],
        [context],
        seeds,
        weight=config.simulate.weight,
        base_seed=config.seed,
        workers=config.simulate.workers,
    )
    by_n = {row["N"]: row for row in rows}
    trend = [by_n[n]["retention"] for n in (1, 2, 4, 8)]
    monotone = all(a <= b for a, b in zip(trend, trend[1:]))
    wrong_accuracy = [
        row["N"]
        for row in rows
        if row["expected_accuracy"] != min(1.0, (capacity // row["N"]) * (2 ** row["N"] - 1) / context)
    ]
    curve = ", ".join(f"N={n}: {by_n[n]['retention']:.2f}" for n in sorted(by_n))
    details = f"|C|={capacity}, context={context}, {seeds} seeds; retention {curve}"
    if wrong_accuracy:
        details += f"; expected accuracy off for N={wrong_accuracy}"
    if monotone and not wrong_accuracy and by_n[16]["retention"] > by_n[8]["retention"]:
        return VerificationCheck(
            check_name="Cascade-count trend",
            status="warning",
            tolerance="N=16 not above N=8",
            details=details + "; N=16 exceeds N=8",
        )
    return _check(
        "Cascade-count trend",
        monotone and not wrong_accuracy,
        "non-decreasing to N=8; N=16 not above N=8; exact expected accuracy",
        details,
    )


def _check_baseline_ordering(config: RunConfig, quick: bool) -> VerificationCheck:
    """
    Check 11: A uniformly placed marked token survives at least as often in the
    selection-free cascade as in a sliding window, and at least as often with
    selection as without.

    Status: pass (both orderings hold), fail
    """
    capacity = 16 if quick else config.verify.retention_capacity
    seeds = 10 if quick else config.verify.retention_seeds
    cascade_config = CascadeConfig(total_capacity=capacity, num_cascades=4, sink_size=config.simulate.sink_size)
    context = 4 * token_span(cascade_config)
    positions = marked_positions(context, seeds, config.seed)
    rates = baseline_ordering(cascade_config, context, positions, config.simulate.weight, config.seed)
    ok = (
        rates["sliding_window"] <= rates["cascade_no_selection"]
        and rates["cascade_no_selection_sampled"] <= rates["cascade_full_sampled"]
    )
    return _check(
        "Baseline ordering",
        ok,
        "sliding_window <= cascade_no_selection <= cascade_full",
        f"|C|={capacity}, N=4, context={context}: sliding window {rates['sliding_window']:.3f}, "
        f"no selection {rates['cascade_no_selection']:.3f} over every position; "
        f"on {seeds} shared positions no selection {rates['cascade_no_selection_sampled']:.3f}, "
        f"with selection {rates['cascade_full_sampled']:.3f}",
    )


def _check_mask_structure(config: RunConfig, quick: bool) -> VerificationCheck:
    """
    Check 10: Reconstructed masks respect the row budget and the cascade reaches
    further back than the single window.

    Status: pass (budget holds, reach >= 3x the window's beyond the span), fail
    """
    capacity = 256 if quick else config.viz.capacity
    length = 1024 if quick else config.verify.mask_length
    sink = config.viz.sink_size
    stride = 1
    cascade_config = CascadeConfig(total_capacity=capacity, num_cascades=config.viz.cascades, sink_size=sink)
    stream = SyntheticStream(length=length)
    span = token_span(cascade_config)
    budget = sink + capacity + stride

    masks = {}
    for policy in (PolicyKind.STREAMING_LLM_SINK, PolicyKind.CASCADE_NO_SELECTION):
        masks[policy] = reconstruct_mask(replay_trace(policy, cascade_config, stream), length, stride)
    over_budget = [p.value for p, m in masks.items() if int(row_nonzeros(m).max()) > budget]
    if over_budget:
        return _check("Mask structure", False, "exact", f"row budget {budget} exceeded by {over_budget}")

    cascade_reach = oldest_reach(masks[PolicyKind.CASCADE_NO_SELECTION], sink)
    window_reach = oldest_reach(masks[PolicyKind.STREAMING_LLM_SINK], sink)
    rows = np.arange(length)
    late = rows > span
    if not late.any():
        return _check("Mask structure", False, "exact", f"S={length} never exceeds the token span {span}")
    ratio = float(np.min(cascade_reach[late] / np.maximum(window_reach[late], 1)))
    within_span = bool(np.all(cascade_reach[late] <= span + config.viz.cascades))
    return _check(
        "Mask structure",
        ratio >= 3.0 and within_span,
        "row budget exact; reach ratio >= 3",
        f"|C|={capacity}, N={config.viz.cascades}, S={length}: max row nonzeros "
        f"{int(row_nonzeros(masks[PolicyKind.CASCADE_NO_SELECTION]).max())} <= {budget}, "
        f"min reach ratio beyond span {ratio:.2f}",
    )


def run_verification(
    config: RunConfig,
    strict: bool = False,
    fault: Optional[str] = None,
    quick: bool = False,
) -> VerificationReport:
    """
    Run every oracle check and aggregate the results.

    ``quick`` shrinks the randomized suites for interactive use; ``fault``
    injects a ring-store mutation into the single-cascade equivalence check.
    """
    v = config.verify
    seed = config.seed
    scale = (lambda n: max(1, n // 10)) if quick else (lambda n: n)
    suite: List[Callable[[], VerificationCheck]] = [
        lambda: _check_ring_replay(scale(v.ring_sequences), seed),
        lambda: _check_sink_equivalence(scale(v.equivalence_streams), v.equivalence_capacity, seed, fault),
        lambda: _check_naive_pattern(seed),
        lambda: _check_span(v.span_steps),
        _check_positional_indices,
        lambda: _check_chunk_ema(scale(v.ema_instances), seed),
        lambda: _check_dense_equivalence(strict or config.strict, seed),
        _check_selection_ablation,
        lambda: _check_cascade_trend(config, quick),
        lambda: _check_mask_structure(config, quick),
        lambda: _check_baseline_ordering(config, quick),
    ]
    if quick:
        suite.pop(3)

    checks: List[VerificationCheck] = []
    for run in suite:
        check = run()
        logger.info("%s: %s (%s)", check.check_name, check.status, check.details)
        checks.append(check)

    passed = sum(1 for c in checks if c.status == "pass")
    failed = sum(1 for c in checks if c.status == "fail")
    warnings = sum(1 for c in checks if c.status == "warning")
    if failed > 0:
        overall_status = "fail"
    elif warnings > 0:
        overall_status = "warning"
    else:
        overall_status = "pass"

    return VerificationReport(
        overall_status=overall_status,
        checks=checks,
        warnings=[f"{c.check_name}: {c.details}" for c in checks if c.status in ["warning", "fail"]],
        passed_checks=passed,
        failed_checks=failed,
        warning_checks=warnings,
    )
