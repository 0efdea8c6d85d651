"""Command-line entry point: ``python -m backend.cli <subcommand>``."""
import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import configure_logging, load_run_config
from .models.errors import CascadeError
from .models.schemas import CascadeConfig, PrefillConfig, RunConfig, SyntheticStream
from .services.bench import run_benchmarks
from .services.cascade_cache import EvictionTrace, expected_retrieval_accuracy, sparsity, token_span
from .services.evaluator import FAULTS, run_verification
from .services.exporters import write_bench_csv, write_mask_csv, write_mask_pgm
from .services.prefill_driver import DeskModel, prefill
from .services.workloads import (
    oldest_reach,
    reconstruct_mask,
    replay_trace,
    retention_curve,
    row_nonzeros,
    write_curve_csv,
    write_retention_csv,
)

logger = logging.getLogger("backend.cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_ERROR = 2


def cmd_span(config: RunConfig, args: argparse.Namespace) -> int:
    capacity = config.cache.total_capacity
    seq_len = args.seq_len
    print(f"{'|C|':>8} {'N':>4} {'span':>10} {'overall':>9} {'window':>9} {'expected':>9}")
    for n in (1, 2, 4, 8, 16):
        if capacity % n:
            continue
        cache = config.cache.model_copy(update={"num_cascades": n})
        span = token_span(cache)
        overall, window = sparsity(cache, seq_len)
        accuracy = expected_retrieval_accuracy(span, seq_len)
        print(f"{capacity:>8} {n:>4} {span:>10} {overall:>9.4f} {window:>9.4f} {accuracy:>9.4f}")
    return EXIT_OK


def cmd_simulate(config: RunConfig, args: argparse.Namespace) -> int:
    section = config.simulate
    base = CascadeConfig(
        total_capacity=section.capacity,
        num_cascades=1,
        sink_size=section.sink_size,
        ema_gamma=config.cache.ema_gamma,
    )
    rows, records = retention_curve(
        base,
        section.policies,
        section.cascades,
        section.contexts,
        section.seeds,
        weight=section.weight,
        base_seed=config.seed,
        workers=section.workers,
    )
    out = Path(config.out_dir)
    write_retention_csv(records, out / "retention_records.csv")
    write_curve_csv(rows, out / "retention_curve.csv")
    print(f"{'policy':<22} {'N':>3} {'context':>8} {'retention':>10} {'span':>8} {'expected':>9}")
    for row in rows:
        print(
            f"{row['policy']:<22} {row['N']:>3} {row['context']:>8} {row['retention']:>10.3f} "
            f"{row['token_span']:>8} {row['expected_accuracy']:>9.4f}"
        )
    logger.info("simulate wrote %d records to %s", len(records), out)
    return EXIT_OK


def cmd_verify(config: RunConfig, args: argparse.Namespace) -> int:
    fault = args.fault or config.verify.fault
    report = run_verification(config, strict=config.strict, fault=fault)
    for check in report.checks:
        print(f"[{check.status.upper():<4}] {check.check_name:<28} tol={check.tolerance:<40} {check.details}")
    print(
        f"\nOverall: {report.overall_status.upper()} "
        f"({report.passed_checks} passed, {report.failed_checks} failed, {report.warning_checks} warnings)"
    )
    return EXIT_OK if report.overall_status != "fail" else EXIT_FAILED


def cmd_bench(config: RunConfig, args: argparse.Namespace) -> int:
    records = run_benchmarks(config.bench, config.attention, config.seed)
    path = write_bench_csv(records, Path(config.out_dir) / "bench.csv")
    print(f"{'benchmark':<10} {'variant':<14} {'median_s':>10} {'iqr_s':>10} {'per_op_s':>12}")
    for r in records:
        print(f"{r.benchmark:<10} {r.variant:<14} {r.median_s:>10.4f} {r.iqr_s:>10.4f} {r.per_op_s:>12.3e}")
    logger.info("bench wrote %s", path)
    return EXIT_OK


def cmd_viz(config: RunConfig, args: argparse.Namespace) -> int:
    section = config.viz
    out = Path(config.out_dir)
    cache = CascadeConfig(
        total_capacity=section.capacity,
        num_cascades=section.cascades,
        sink_size=section.sink_size,
        ema_gamma=config.cache.ema_gamma,
    )
    if args.trace:
        jobs = [(Path(args.trace).stem, EvictionTrace.from_csv(args.trace, sink_size=section.sink_size))]
    else:
        stream = SyntheticStream(length=section.length, seed=config.seed)
        jobs = []
        for policy in section.policies:
            trace = replay_trace(policy, cache, stream)
            trace.to_csv(out / f"trace_{policy.value}.csv")
            jobs.append((policy.value, trace))

    for name, trace in jobs:
        mask = reconstruct_mask(trace, section.length, section.stride)
        write_mask_pgm(mask, out / f"mask_{name}.pgm")
        if section.csv_mirror:
            write_mask_csv(mask, out / f"mask_{name}.csv")
        reach = oldest_reach(mask, trace.sink_size)
        print(
            f"{name:<22} max row nonzeros {int(row_nonzeros(mask).max()):>6}  "
            f"final reach {int(reach[-1]):>6}"
        )
    return EXIT_OK


def cmd_prefill(config: RunConfig, args: argparse.Namespace) -> int:
    section = config.prefill
    prefill_config = PrefillConfig(
        stride=section.stride,
        layers=section.layers,
        cache_config=config.cache,
        attn=config.attention,
        beta=section.beta,
        precision="float64" if config.strict else "float32",
        seed=config.seed,
    )
    model = DeskModel(config.attention, section.layers, config.seed, np.dtype(prefill_config.precision))
    inputs = model.embed(section.seq_len, config.seed)
    start = time.perf_counter()
    result = prefill(prefill_config, inputs, model)
    elapsed = time.perf_counter() - start
    out = Path(config.out_dir)
    for layer, traces in enumerate(result.traces):
        for unit, trace in enumerate(traces):
            trace.to_csv(out / f"prefill_trace_l{layer}_u{unit}.csv")
    residents = result.caches[-1].units[0].resident_count()
    print(f"prefill S={section.seq_len} stride={section.stride}: {elapsed:.3f}s, {residents} residents per unit")
    return EXIT_OK


COMMANDS = {
    "span": cmd_span,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "viz": cmd_viz,
    "prefill": cmd_prefill,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="Override the run seed")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--strict", action="store_true", default=None, help="Double precision with 1e-9 tolerances")

    parser = argparse.ArgumentParser(prog="cascade", description="Cascading KV cache simulations and checks")
    sub = parser.add_subparsers(dest="command", required=True)
    span = sub.add_parser("span", parents=[common], help="Print the token span and sparsity table")
    span.add_argument("--seq-len", type=int, default=32768)
    sub.add_parser("simulate", parents=[common], help="Retention grid over policies, N and contexts")
    verify = sub.add_parser("verify", parents=[common], help="Run every oracle check")
    verify.add_argument("--fault", choices=sorted(FAULTS), help="Inject a ring-store mutation")
    sub.add_parser("bench", parents=[common], help="Latency microbenchmarks")
    viz = sub.add_parser("viz", parents=[common], help="Write reconstructed attention masks")
    viz.add_argument("--trace", help="Reconstruct from an existing trace CSV instead of replaying")
    sub.add_parser("prefill", parents=[common], help="Strided prefill of random embeddings, traces to CSV")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        config = load_run_config(args.config, seed=args.seed, out_dir=args.out, strict=args.strict)
        logger.info("%s started (seed %d, out %s)", args.command, config.seed, config.out_dir)
        status = COMMANDS[args.command](config, args)
    except CascadeError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_ERROR
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_ERROR
    logger.info("%s finished with status %d", args.command, status)
    return status


if __name__ == "__main__":
    sys.exit(main())
