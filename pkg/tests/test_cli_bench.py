"""
Tests for the command-line surface: run config, exporters, verification suite, benchmarks.

Run with: python -m pytest tests/test_cli_bench.py -v
Slow acceptance-scale runs: python -m pytest tests/test_cli_bench.py -v -m slow
"""
import numpy as np
import pytest

from backend.cli import EXIT_ERROR, EXIT_FAILED, EXIT_OK, main
from backend.config import load_run_config
from backend.models.errors import ConfigError
from backend.models.schemas import AttentionParams, BenchRecord, BenchSection, RunConfig
from backend.services import evaluator
from backend.services.bench import bench_cache_ops, bench_prefill, bench_ring_ops, summarize
from backend.services.exporters import mask_to_pgm_bytes, write_bench_csv, write_mask_csv

VIZ_TOML = """
[viz]
capacity = 16
cascades = 2
sink_size = 1
length = {length}
policies = ["streaming_llm_sink", "cascade_no_selection"]
"""


@pytest.fixture
def clean_env(monkeypatch):
    for name in ("CASCADE_OUT_DIR", "CASCADE_SEED", "CASCADE_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)
    return monkeypatch


def write_config(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestRunConfig:
    def test_defaults(self, clean_env):
        config = load_run_config()
        assert config.seed == 0
        assert config.cache.sink_size == 64
        assert config.cache.ema_gamma == 0.9999
        assert config.cache.num_cascades == 4

    def test_precedence(self, clean_env, tmp_path):
        path = write_config(tmp_path, "seed = 3\n")
        clean_env.setenv("CASCADE_SEED", "7")
        assert load_run_config().seed == 7
        assert load_run_config(path).seed == 3
        assert load_run_config(path, seed=9).seed == 9

    def test_unknown_key_rejected(self, clean_env, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(write_config(tmp_path, "bogus = 1\n"))

    def test_invalid_cache_rejected(self, clean_env, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(write_config(tmp_path, "[cache]\ntotal_capacity = 10\nnum_cascades = 4\n"))

    def test_missing_and_malformed_files(self, clean_env, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "absent.toml"))
        with pytest.raises(ConfigError):
            load_run_config(write_config(tmp_path, "seed = = 1\n"))

    def test_bad_env_seed(self, clean_env):
        clean_env.setenv("CASCADE_SEED", "abc")
        with pytest.raises(ConfigError):
            load_run_config()


class TestExporters:
    def test_pgm_layout(self):
        mask = np.array([[True, False], [True, True], [False, False]])
        data = mask_to_pgm_bytes(mask)
        assert data == b"P5\n2 3\n255\n" + bytes([255, 0, 255, 255, 0, 0])

    def test_pgm_rejects_empty(self):
        with pytest.raises(ConfigError):
            mask_to_pgm_bytes(np.zeros((0, 0), dtype=bool))

    def test_mask_csv(self, tmp_path):
        path = write_mask_csv(np.eye(2, dtype=bool), tmp_path / "mask.csv")
        assert path.read_text().splitlines() == ["k0,k1", "1,0", "0,1"]

    def test_bench_csv(self, tmp_path):
        record = BenchRecord(
            benchmark="cache_ops", variant="ring_n1", capacity=16, cascades=1, stride=0,
            tokens=32, runs=1, median_s=0.5, iqr_s=0.0, per_op_s=0.5 / 32,
        )
        lines = write_bench_csv([record], tmp_path / "bench.csv").read_text().splitlines()
        assert lines[0] == "benchmark,variant,capacity,cascades,stride,tokens,runs,median_s,iqr_s,per_op_s"
        assert lines[1].startswith("cache_ops,ring_n1,16,1,0,32,1,0.5,0.0,")


class TestVerification:
    def test_deterministic_checks_pass(self):
        checks = [
            evaluator._check_ring_replay(50, seed=0),
            evaluator._check_sink_equivalence(50, 8, seed=0, fault=None),
            evaluator._check_naive_pattern(seed=0, instances=50),
            evaluator._check_positional_indices(),
            evaluator._check_chunk_ema(5, seed=0),
            evaluator._check_dense_equivalence(strict=True, seed=0),
            evaluator._check_selection_ablation(),
        ]
        for check in checks:
            assert check.status == "pass", f"{check.check_name}: {check.details}"

    def test_swap_fault_is_caught(self):
        check = evaluator._check_sink_equivalence(50, 8, seed=0, fault="swap-evict")
        assert check.status == "fail"
        assert "differs at event" in check.details

    def test_span_check(self):
        check = evaluator._check_span(40_000)
        assert check.status == "pass", check.details

    def test_span_check_needs_steady_state(self):
        assert evaluator._check_span(1000).status == "fail"

    @staticmethod
    def fake_curve(retention, accuracy_override=None):
        def curve(base, policies, cascades, contexts, seeds, **kwargs):
            context = contexts[0]
            rows = [
                {
                    "N": n,
                    "retention": retention[n],
                    "expected_accuracy": min(1.0, (base.total_capacity // n) * (2**n - 1) / context),
                }
                for n in cascades
            ]
            for row in rows:
                if accuracy_override and row["N"] in accuracy_override:
                    row["expected_accuracy"] = accuracy_override[row["N"]]
            return rows, []

        return curve

    @pytest.mark.parametrize(
        "retention,status",
        [
            ({1: 0.0, 2: 0.1, 4: 0.3, 8: 0.4, 16: 0.4}, "pass"),
            ({1: 0.0, 2: 0.0, 4: 0.0, 8: 0.4, 16: 1.0}, "warning"),
            ({1: 0.2, 2: 0.1, 4: 0.3, 8: 0.4, 16: 0.4}, "fail"),
        ],
        ids=["flat-tail", "n16-above-n8", "dip-before-n8"],
    )
    def test_cascade_trend_verdicts(self, monkeypatch, retention, status):
        monkeypatch.setattr(evaluator, "retention_curve", self.fake_curve(retention))
        check = evaluator._check_cascade_trend(RunConfig(), quick=True)
        assert check.status == status, check.details

    def test_cascade_trend_checks_expected_accuracy_independently(self, monkeypatch):
        retention = {1: 0.0, 2: 0.1, 4: 0.3, 8: 0.4, 16: 0.4}
        monkeypatch.setattr(evaluator, "retention_curve", self.fake_curve(retention, accuracy_override={2: 0.5}))
        check = evaluator._check_cascade_trend(RunConfig(), quick=True)
        assert check.status == "fail"
        assert "expected accuracy off for N=[2]" in check.details

    def test_warning_sets_overall_status(self, monkeypatch):
        passing = evaluator._check("stub", True, "exact", "")
        for name in (
            "_check_ring_replay", "_check_sink_equivalence", "_check_naive_pattern", "_check_span",
            "_check_positional_indices", "_check_chunk_ema", "_check_dense_equivalence",
            "_check_selection_ablation", "_check_mask_structure", "_check_baseline_ordering",
        ):
            monkeypatch.setattr(evaluator, name, lambda *args, **kwargs: passing)
        monkeypatch.setattr(
            evaluator, "retention_curve", self.fake_curve({1: 0.0, 2: 0.0, 4: 0.0, 8: 0.4, 16: 1.0})
        )
        report = evaluator.run_verification(RunConfig(), quick=True)
        assert report.overall_status == "warning"
        assert report.warning_checks == 1
        assert report.failed_checks == 0
        assert report.warnings[0].startswith("Cascade-count trend")

    def test_baseline_ordering_check(self):
        check = evaluator._check_baseline_ordering(RunConfig(), quick=True)
        assert check.status == "pass", check.details

    @pytest.mark.slow
    def test_quick_report(self):
        report = evaluator.run_verification(RunConfig(), quick=True)
        assert len(report.checks) == 10
        assert report.passed_checks + report.failed_checks + report.warning_checks == 10
        assert {c.status for c in report.checks} <= {"pass", "warning", "fail"}


class TestBench:
    @pytest.fixture
    def section(self):
        return BenchSection(tokens=256, capacity=64, dim=8, sink_size=4, seq_len=128,
                            strides=[1, 64], prefill_capacity=32, runs=2, warmup=0)

    def test_summarize(self):
        assert summarize([1.0, 2.0, 3.0, 4.0, 5.0]) == (3.0, 2.0)

    def test_cache_ops_records(self, section):
        records = bench_cache_ops(section)
        assert [r.variant for r in records] == ["ring_n1", "ring_n4", "concat"]
        assert all(r.median_s > 0 and r.tokens == 256 for r in records)

    def test_prefill_records(self, section):
        records = bench_prefill(section, AttentionParams(dim=8, num_q_heads=2, num_kv_heads=1))
        assert [r.stride for r in records] == [1, 64]

    @pytest.mark.slow
    def test_ring_beats_concatenation(self):
        section = BenchSection(tokens=8192, capacity=8192, dim=128, sink_size=64, runs=2, warmup=0)
        by_variant = {r.variant: r for r in bench_cache_ops(section)}
        assert by_variant["concat"].median_s > 3 * by_variant["ring_n1"].median_s

    @pytest.mark.slow
    def test_ring_op_cost_flat_in_capacity(self):
        section = BenchSection(tokens=16384, dim=128, runs=3, warmup=1)
        small, large = bench_ring_ops(section)
        assert large.per_op_s < 3 * small.per_op_s

    @pytest.mark.slow
    def test_larger_stride_is_faster(self):
        section = BenchSection(seq_len=8192, strides=[1, 256], prefill_capacity=1024, sink_size=64, runs=1, warmup=0)
        one, wide = bench_prefill(section, AttentionParams())
        assert one.median_s > 1.5 * wide.median_s


class TestCli:
    def test_span_table(self, clean_env, capsys):
        assert main(["span"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "15360" in out
        assert "0.4688" in out

    def test_viz_writes_masks_and_traces(self, clean_env, tmp_path):
        config = write_config(tmp_path, VIZ_TOML.format(length=64))
        out = tmp_path / "out"
        assert main(["viz", "--config", config, "--out", str(out)]) == EXIT_OK
        for name in ("streaming_llm_sink", "cascade_no_selection"):
            assert (out / f"trace_{name}.csv").exists()
            assert (out / f"mask_{name}.pgm").read_bytes().startswith(b"P5\n64 64\n255\n")
            assert (out / f"mask_{name}.csv").exists()

    def test_viz_from_trace_file(self, clean_env, tmp_path):
        out = tmp_path / "out"
        main(["viz", "--config", write_config(tmp_path, VIZ_TOML.format(length=64)), "--out", str(out)])
        trace = str(out / "trace_cascade_no_selection.csv")
        replay_out = tmp_path / "replay"
        config = write_config(tmp_path, VIZ_TOML.format(length=64), "again.toml")
        assert main(["viz", "--config", config, "--out", str(replay_out), "--trace", trace]) == EXIT_OK
        assert (replay_out / "mask_trace_cascade_no_selection.pgm").exists()

    def test_viz_incomplete_trace_writes_nothing(self, clean_env, tmp_path):
        out = tmp_path / "out"
        main(["viz", "--config", write_config(tmp_path, VIZ_TOML.format(length=64)), "--out", str(out)])
        trace = str(out / "trace_streaming_llm_sink.csv")
        longer = write_config(tmp_path, VIZ_TOML.format(length=100), "longer.toml")
        replay_out = tmp_path / "replay"
        assert main(["viz", "--config", longer, "--out", str(replay_out), "--trace", trace]) == EXIT_ERROR
        assert not (replay_out / "mask_trace_streaming_llm_sink.pgm").exists()

    def test_simulate_writes_tables(self, clean_env, tmp_path):
        config = write_config(
            tmp_path,
            "[simulate]\ncapacity = 8\nsink_size = 1\ncascades = [1, 2]\ncontexts = [64]\nseeds = 2\n"
            'policies = ["cascade_full"]\n',
        )
        out = tmp_path / "out"
        assert main(["simulate", "--config", config, "--out", str(out)]) == EXIT_OK
        assert len((out / "retention_curve.csv").read_text().splitlines()) == 3
        assert len((out / "retention_records.csv").read_text().splitlines()) == 5

    def test_prefill_writes_unit_traces(self, clean_env, tmp_path):
        config = write_config(
            tmp_path,
            "[cache]\ntotal_capacity = 16\nnum_cascades = 2\nsink_size = 2\n"
            "[prefill]\nseq_len = 40\nstride = 8\nlayers = 2\n",
        )
        out = tmp_path / "out"
        assert main(["prefill", "--config", config, "--out", str(out)]) == EXIT_OK
        assert (out / "prefill_trace_l1_u1.csv").exists()

    def test_bad_config_exits_with_error(self, clean_env, tmp_path):
        assert main(["span", "--config", write_config(tmp_path, "bogus = true\n")]) == EXIT_ERROR

    @pytest.mark.slow
    def test_verify_with_fault_fails(self, clean_env, tmp_path):
        config = write_config(
            tmp_path,
            "[verify]\nring_sequences = 20\nequivalence_streams = 20\nspan_steps = 40000\nema_instances = 3\n"
            "retention_capacity = 16\nretention_seeds = 10\nmask_length = 1024\n"
            "[viz]\ncapacity = 256\n",
        )
        assert main(["verify", "--config", config, "--fault", "swap-evict", "--out", str(tmp_path)]) == EXIT_FAILED
