"""
Tests for baseline policies, retention replays, mask reconstruction and the retention grid.

Run with: python -m pytest tests/test_workloads.py -v
"""
import numpy as np
import pytest

from backend.models.errors import ConfigError, IncompleteTraceError
from backend.models.schemas import CascadeConfig, MarkedToken, PolicyKind, ScoreProfile, SyntheticStream
from backend.services.cascade_cache import CascadeCache, EventKind, token_span
from backend.services.ring_store import CacheEntry
from backend.services.workloads import (
    SinkCacheReference,
    baseline_ordering,
    effective_config,
    marked_positions,
    naive_cascade_residents,
    oldest_reach,
    reconstruct_mask,
    replay_trace,
    resident_by_position,
    retention_curve,
    row_nonzeros,
    run_retention,
    single_heavy_stream,
    write_curve_csv,
    write_retention_csv,
)

BLANK = np.zeros(1, dtype=np.float32)


@pytest.fixture
def tiny_sink_config():
    """Four window slots behind one sink token."""
    return CascadeConfig(total_capacity=4, num_cascades=1, sink_size=1)


class TestSinkCacheReference:
    @pytest.mark.parametrize("capacity,sink,length", [(4, 0, 30), (8, 3, 100), (1, 1, 5)])
    def test_event_stream_matches_single_cascade(self, capacity, sink, length):
        config = CascadeConfig(total_capacity=capacity, num_cascades=1, sink_size=sink, selection_enabled=False)
        cascade = CascadeCache(config)
        reference = SinkCacheReference(capacity, sink)
        for pos in range(length):
            item = CacheEntry(key=BLANK, value=BLANK, score=0.0, origin_pos=pos)
            cascade.add_token(item)
            reference.add_token(item)
        assert cascade.trace.events == reference.trace.events
        assert list(cascade.resident_positions()) == list(reference.resident_positions())

    def test_keeps_vectors_in_order(self):
        reference = SinkCacheReference(2, 1, entry_shape=(2,))
        for pos in range(5):
            reference.add_token(CacheEntry(key=np.full(2, pos), value=np.full(2, -pos), score=0.0, origin_pos=pos))
        np.testing.assert_array_equal(reference.sink_keys[:, 0], [0])
        np.testing.assert_array_equal(reference.keys[:, 0], [3, 4])
        np.testing.assert_array_equal(reference.values[:, 0], [-3, -4])

    def test_rejects_bad_sizes(self):
        with pytest.raises(ConfigError):
            SinkCacheReference(0, 1)


class TestPolicies:
    def test_effective_configs(self):
        base = CascadeConfig(total_capacity=64, num_cascades=4, sink_size=4)
        window = effective_config(PolicyKind.SLIDING_WINDOW, base)
        assert (window.num_cascades, window.sink_size, window.selection_enabled) == (1, 0, False)
        sink = effective_config(PolicyKind.STREAMING_LLM_SINK, base)
        assert (sink.num_cascades, sink.sink_size) == (1, 4)
        assert not effective_config(PolicyKind.CASCADE_NO_SELECTION, base).selection_enabled
        assert effective_config(PolicyKind.CASCADE_FULL, base).num_cascades == 4

    def test_sliding_window_survival(self):
        config = CascadeConfig(total_capacity=4, num_cascades=2, sink_size=2)
        stream = SyntheticStream(
            length=20,
            score_profile=ScoreProfile.MULTI_HEAVY,
            marked=[MarkedToken(pos=3), MarkedToken(pos=18)],
        )
        report = run_retention(PolicyKind.SLIDING_WINDOW, config, stream)
        dropped, kept = report.records
        assert not dropped.resident and dropped.final_sub_cache is None
        assert dropped.survival_steps == 3
        assert kept.resident and kept.final_sub_cache == 1
        assert kept.survival_steps == 1
        assert report.empirical_span == 3
        assert report.resident_count == 4
        assert report.token_span == 4

    def test_sink_token_is_kept_forever(self):
        config = CascadeConfig(total_capacity=8, num_cascades=2, sink_size=2)
        stream = single_heavy_stream(500, 1, weight=1.0)
        for policy in (PolicyKind.STREAMING_LLM_SINK, PolicyKind.CASCADE_FULL):
            record = run_retention(policy, config, stream).records[0]
            assert record.resident and record.final_sub_cache == 0
            assert record.survival_steps == 498

    def test_selection_holds_heavy_token_past_the_pattern(self):
        config = CascadeConfig(total_capacity=64, num_cascades=4, sink_size=4)
        span = token_span(config)
        length = 4 * span
        centre = length - span // 2
        full, plain = 0, 0
        for pos in range(centre - 8, centre + 9):
            stream = single_heavy_stream(length, pos, weight=1000.0)
            full += run_retention(PolicyKind.CASCADE_FULL, config, stream).records[0].resident
            plain += run_retention(PolicyKind.CASCADE_NO_SELECTION, config, stream).records[0].resident
        assert full == 17
        assert plain < 17

    def test_short_stream_warns(self, caplog):
        config = CascadeConfig(total_capacity=64, num_cascades=4, sink_size=4)
        with caplog.at_level("WARNING"):
            report = run_retention(PolicyKind.CASCADE_FULL, config, single_heavy_stream(10, 5, 10.0))
        assert "never fills" in caplog.text
        assert report.records[0].resident


class TestMaskReconstruction:
    def test_sink_window_mask(self, tiny_sink_config):
        trace = replay_trace(PolicyKind.STREAMING_LLM_SINK, tiny_sink_config, SyntheticStream(length=10))
        mask = reconstruct_mask(trace, 10)
        assert int(row_nonzeros(mask).max()) == 1 + 4 + 1
        assert list(np.flatnonzero(mask[9])) == [0, 5, 6, 7, 8, 9]
        # query 5 still sees token 1, which is evicted when 5 is inserted
        assert list(np.flatnonzero(mask[5])) == [0, 1, 2, 3, 4, 5]
        assert oldest_reach(mask, 1)[9] == 4
        assert not mask[np.triu_indices(10, 1)].any()

    def test_chunked_rows_share_cache_state(self, tiny_sink_config):
        trace = replay_trace(PolicyKind.STREAMING_LLM_SINK, tiny_sink_config, SyntheticStream(length=12))
        mask = reconstruct_mask(trace, 12, stride=4)
        # chunk [8, 12) reads the cache as it stood before token 8
        assert list(np.flatnonzero(mask[11])) == [0, 4, 5, 6, 7, 8, 9, 10, 11]
        assert int(row_nonzeros(mask).max()) <= 1 + 4 + 4

    def test_incomplete_trace(self, tiny_sink_config):
        trace = replay_trace(PolicyKind.STREAMING_LLM_SINK, tiny_sink_config, SyntheticStream(length=10))
        with pytest.raises(IncompleteTraceError):
            reconstruct_mask(trace, 11)

    def test_cascade_reaches_further_than_window(self):
        config = CascadeConfig(total_capacity=64, num_cascades=4, sink_size=2)
        stream = SyntheticStream(length=1200)
        window = reconstruct_mask(replay_trace(PolicyKind.STREAMING_LLM_SINK, config, stream), 1200)
        cascade = reconstruct_mask(replay_trace(PolicyKind.CASCADE_NO_SELECTION, config, stream), 1200)
        budget = 2 + 64 + 1
        assert int(row_nonzeros(cascade).max()) <= budget
        late = np.arange(1200) > token_span(config)
        assert np.all(oldest_reach(cascade, 2)[late] >= 3 * oldest_reach(window, 2)[late])

    def test_mask_discards_match_trace(self):
        config = CascadeConfig(total_capacity=8, num_cascades=2, sink_size=0, selection_enabled=False)
        trace = replay_trace(PolicyKind.CASCADE_NO_SELECTION, config, SyntheticStream(length=60))
        _, _, discarded = naive_cascade_residents(config, 60)
        assert [e.origin_pos for e in trace if e.kind == EventKind.FINAL_DISCARD] == discarded
        mask = reconstruct_mask(trace, 60)
        last = set(np.flatnonzero(mask[59]))
        for pos in discarded[:-1]:
            assert pos not in last


class TestRetentionCurve:
    def test_marked_positions_are_shared_and_in_range(self):
        positions = marked_positions(100, 20, base_seed=4)
        assert positions == marked_positions(100, 20, base_seed=4)
        assert all(0 <= p < 100 for p in positions)

    def test_grid_rows_and_records(self, tmp_path):
        base = CascadeConfig(total_capacity=16, num_cascades=1, sink_size=2)
        rows, records = retention_curve(
            base, [PolicyKind.CASCADE_FULL, PolicyKind.STREAMING_LLM_SINK], [1, 2], [200], seeds=3
        )
        assert len(rows) == 4
        assert len(records) == 12
        for row in rows:
            assert row["expected_accuracy"] == pytest.approx(min(1.0, row["token_span"] / 200))
            assert 0.0 <= row["retention"] <= 1.0
        sink_rows = [r for r in rows if r["policy"] == "streaming_llm_sink"]
        assert {r["N"] for r in sink_rows} == {1}

        curve = write_curve_csv(rows, tmp_path / "curve.csv").read_text().splitlines()
        assert curve[0] == "policy,N,capacity,context,seeds,retention,token_span,expected_accuracy"
        assert len(curve) == 5
        table = write_retention_csv(records, tmp_path / "records.csv").read_text().splitlines()
        assert table[0] == "policy,N,capacity,seed,marked_pos,resident,survival_steps,empirical_span"
        assert len(table) == 13

    def test_invalid_cascade_count(self):
        base = CascadeConfig(total_capacity=12, num_cascades=1, sink_size=2)
        with pytest.raises(ValueError):
            retention_curve(base, [PolicyKind.CASCADE_FULL], [5], [100], seeds=1)


class TestBaselineOrdering:
    @pytest.fixture
    def ordering_config(self):
        """|C| = 16 over four sub-caches of 4, two sink tokens; span 60."""
        return CascadeConfig(total_capacity=16, num_cascades=4, sink_size=2)

    def test_sliding_window_keeps_the_last_window(self, ordering_config):
        kept = resident_by_position(PolicyKind.SLIDING_WINDOW, ordering_config, 240)
        assert kept.sum() == 16
        assert kept[-16:].all()

    def test_selection_free_cascade_keeps_sink_and_capacity(self, ordering_config):
        kept = resident_by_position(PolicyKind.CASCADE_NO_SELECTION, ordering_config, 240)
        assert kept.sum() == 18
        assert kept[:2].all()
        assert kept[-4:].all()

    def test_scored_policy_rejected(self, ordering_config):
        with pytest.raises(ConfigError):
            resident_by_position(PolicyKind.CASCADE_FULL, ordering_config, 240)

    def test_ordering_on_shared_positions(self, ordering_config):
        context = 4 * token_span(ordering_config)
        rates = baseline_ordering(ordering_config, context, marked_positions(context, 20))
        assert rates["sliding_window"] == pytest.approx(16 / context)
        assert rates["cascade_no_selection"] == pytest.approx(18 / context)
        assert rates["cascade_no_selection_sampled"] <= rates["cascade_full_sampled"]

    @pytest.mark.slow
    def test_ordering_over_hundred_seeds(self):
        config = CascadeConfig(total_capacity=64, num_cascades=4, sink_size=4)
        rates = baseline_ordering(config, 960, marked_positions(960, 100))
        assert rates["sliding_window"] <= rates["cascade_no_selection"]
        assert rates["cascade_no_selection_sampled"] <= rates["cascade_full_sampled"]
