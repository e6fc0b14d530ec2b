"""Command-line front door.

Subcommands: run, compare, tune, workload-gen. All outputs are data files
(JSON / CSV / NDJSON); plotting is left to external tooling. Identical
invocations produce byte-identical outputs.

Exit codes: 0 success, 1 usage error, 2 input-validation error, 3 failed
--assert expression.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import sys
from importlib import resources
from pathlib import Path

from .device import ProfileError, load_profile
from .engine import WorkloadError, WorkloadSpec, compare, generate_workload, run
from .scheduler import PolicyParams, SchedulerPolicy
from .tuning import ClusterKey, TuningTable, build_table

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_ASSERT = 3

BUNDLED_WORKLOADS = ("gemm16", "gemv8", "adversarial")


class _UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="gpumux", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--workload", required=True,
                       help="workload JSON path or bundled name "
                            f"({', '.join(BUNDLED_WORKLOADS)})")
        p.add_argument("--profile", default="v100",
                       help="device preset name or profile JSON path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--tuning-table", default=None, help="tuning JSON path")
        p.add_argument("--pad-budget", type=float, default=0.25)
        p.add_argument("--max-delay-fraction", type=float, default=0.5)
        p.add_argument("--straggler-threshold", type=float, default=2.0)

    p_run = sub.add_parser("run", help="simulate one policy")
    add_common(p_run)
    p_run.add_argument("--policy", required=True,
                       choices=["fifo", "edf", "ooo", "time-mux", "space-mux"])
    p_run.add_argument("--assert", dest="assertion", default=None,
                       metavar="EXPR", help='e.g. "slo_attainment>=0.99"')

    p_cmp = sub.add_parser("compare", help="run several policies on one workload")
    add_common(p_cmp)
    p_cmp.add_argument("--policies", required=True,
                       help="comma-separated list, e.g. time-mux,space-mux,ooo")
    p_cmp.add_argument("--jobs", type=int, default=1)

    p_tune = sub.add_parser("tune", help="grid-search blocking parameters")
    p_tune.add_argument("--profile", default="v100")
    p_tune.add_argument("--key", action="append", required=True, metavar="SPEC",
                        help="cluster key as op:dtype:dims, e.g. "
                             "gemm:fp32:1024x1024x1024 (repeatable)")
    p_tune.add_argument("--max-tenancy", type=int, default=4)
    p_tune.add_argument("--budget", type=int, default=256)
    p_tune.add_argument("--seed", type=int, default=0)
    p_tune.add_argument("--out", default=".")

    p_gen = sub.add_parser("workload-gen",
                           help="freeze sampled arrivals into a fixed schedule")
    p_gen.add_argument("--workload", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", default=".")
    return parser


def _resolve_workload(name_or_path: str) -> WorkloadSpec:
    if name_or_path in BUNDLED_WORKLOADS:
        text = resources.files("gpumux.data.workloads").joinpath(
            name_or_path + ".json").read_text()
        return WorkloadSpec.from_dict(json.loads(text))
    return WorkloadSpec.load(name_or_path)


def _policy(variant: str, args) -> SchedulerPolicy:
    params = PolicyParams(pad_budget=args.pad_budget,
                          max_delay_fraction=args.max_delay_fraction,
                          straggler_threshold=args.straggler_threshold)
    return SchedulerPolicy(variant=variant, params=params)


_ASSERT_RE = re.compile(r"^\s*(\w+)\s*(>=|<=|==|>|<)\s*([-+0-9.eE]+)\s*$")


def _check_assertion(expr: str, stats: dict) -> bool:
    match = _ASSERT_RE.match(expr)
    if match is None:
        raise WorkloadError(f"cannot parse assertion {expr!r}")
    metric, op, value = match.groups()
    if metric not in stats:
        raise WorkloadError(f"unknown metric {metric!r} in assertion")
    actual, bound = stats[metric], float(value)
    if actual is None:
        return False
    return {"<": actual < bound, "<=": actual <= bound, ">": actual > bound,
            ">=": actual >= bound, "==": actual == bound}[op]


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _cmd_run(args) -> int:
    workload = _resolve_workload(args.workload)
    profile = load_profile(args.profile)
    table = TuningTable.load(args.tuning_table) if args.tuning_table else None
    result = run(workload, profile, _policy(args.policy, args),
                 seed=args.seed, tuning_table=table)
    out = Path(args.out)
    _write(out / "metrics.json", result.metrics.to_json())
    _write(out / "metrics.csv", result.metrics.to_csv())
    _write(out / "trace.ndjson", result.trace.to_ndjson())
    if args.assertion is not None:
        if not _check_assertion(args.assertion, result.metrics.global_stats):
            print(f"assertion failed: {args.assertion} "
                  f"(metrics: {json.dumps(result.metrics.global_stats, sort_keys=True)})",
                  file=sys.stderr)
            return EXIT_ASSERT
    return EXIT_OK


def _cmd_compare(args) -> int:
    workload = _resolve_workload(args.workload)
    profile = load_profile(args.profile)
    table = TuningTable.load(args.tuning_table) if args.tuning_table else None
    variants = [v.strip() for v in args.policies.split(",") if v.strip()]
    policies = [_policy(v, args) for v in variants]
    report = compare(workload, profile, policies, seed=args.seed,
                     tuning_table=table, jobs=args.jobs)
    out = Path(args.out)
    for variant, result in zip(variants, report["results"]):
        _write(out / variant / "metrics.json", result.metrics.to_json())
        _write(out / variant / "trace.ndjson", result.trace.to_ndjson())

    columns = ("policy", "requests", "completed", "evicted", "slo_attainment",
               "throughput_rps", "throughput_flops", "latency_p50_ns",
               "latency_p99_ns", "utilization", "flop_efficiency")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for variant, result in zip(variants, report["results"]):
        stats = result.metrics.global_stats
        writer.writerow([variant] + [stats.get(c, "") for c in columns[1:]])
    _write(out / "comparison.csv", buf.getvalue())

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("policy", "throughput_flops_ratio", "throughput_rps_ratio",
                     "slo_attainment_delta"))
    for row in report["ratios"]:
        writer.writerow([row["policy"], row["throughput_flops_ratio"],
                         row["throughput_rps_ratio"], row["slo_attainment_delta"]])
    _write(out / "ratios.csv", buf.getvalue())
    return EXIT_OK


def _cmd_tune(args) -> int:
    profile = load_profile(args.profile)
    keys = [ClusterKey.from_string(text) for text in args.key]
    table = build_table(keys, args.max_tenancy, profile, args.budget, args.seed)
    _write(Path(args.out) / "tuning.json",
           json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _cmd_workload_gen(args) -> int:
    spec = _resolve_workload(args.workload)
    requests = generate_workload(spec, args.seed)
    by_stream: dict = {s.stream_id: [] for s in spec.streams}
    for req in requests:
        by_stream[req.stream_id].append(req.arrival)
    frozen = {
        "streams": [
            {"stream_id": s.stream_id, "model_name": s.model_name,
             "slo_ns": s.slo_ns, "batch": s.batch,
             "arrival": {"kind": "fixed", "schedule": by_stream[s.stream_id]}}
            for s in spec.streams
        ],
        "duration_ns": spec.duration,
        "max_tenancy": spec.max_tenancy,
        "provenance": {"seed": args.seed},
    }
    _write(Path(args.out) / "workload.json",
           json.dumps(frozen, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "tune":
            return _cmd_tune(args)
        return _cmd_workload_gen(args)
    except (ProfileError, WorkloadError, FileNotFoundError, KeyError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
