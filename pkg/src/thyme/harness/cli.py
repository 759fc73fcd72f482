"""Command-line interface.

Verbs: gen-trace (synthesize a workload), run (one simulation -> one CSV
row), sweep (node-count x materialization x topology x run grid on a worker
pool), aggregate (runs -> mean/stddev per data point), report (aggregate ->
gnuplot-style columns). Exit codes: 0 ok, 1 configuration error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import multiprocessing
import os
import sys

from ..simnet import ConfigError, SimConfig, read_config_file
from . import metrics
from .scenario import MATERIALIZATIONS, Scenario, ScenarioError, area_for
from .trace import TraceConfig, TraceError, generate_trace, op_counts, \
    read_trace, write_trace


def _add_dataclass_flags(parser, cls, skip=()):
    for field in dataclasses.fields(cls):
        if field.name in skip:
            continue
        typ = field.type if isinstance(field.type, type) else \
            {"float": float, "int": int, "str": str}[field.type]
        parser.add_argument(f"--{field.name}", type=typ, default=None,
                            help=f"override {cls.__name__}.{field.name} "
                                 f"(default {field.default})")


def _collect_overrides(args, cls) -> dict:
    out = {}
    for field in dataclasses.fields(cls):
        value = getattr(args, field.name, None)
        if value is not None:
            out[field.name] = value
    return out


def _sim_config(args, node_count: int) -> SimConfig:
    cfg = SimConfig()
    if getattr(args, "config", None):
        cfg = cfg.with_overrides(read_config_file(args.config))
    overrides = _collect_overrides(args, SimConfig)
    if "area_width" not in overrides and "area_height" not in overrides:
        width, height = area_for(node_count)
        overrides["area_width"] = width
        overrides["area_height"] = height
    return cfg.with_overrides(overrides)


def run_job(job: dict) -> dict:
    """One simulation run; top-level so worker pools can pickle it."""
    meta, ops = read_trace(job["trace"])
    cfg = SimConfig.from_mapping(job["cfg"])
    scenario = Scenario(cfg, job["materialization"], meta, ops,
                        job["topology_seed"], job["run_seed"]).build().run()
    return metrics.collect_row(scenario)


def cmd_gen_trace(args) -> int:
    tc = TraceConfig(node_count=args.nodes)
    tc = tc.with_overrides(
        {k: v for k, v in _collect_overrides(args, TraceConfig).items()
         if k != "node_count"})
    meta, ops = generate_trace(tc)
    write_trace(args.out, meta, ops)
    counts = op_counts(ops)
    print(f"wrote {args.out}: {counts['PUB']} pubs, {counts['SUB']} subs, "
          f"{counts['UNPUB']} unpubs, {counts['UNSUB']} unsubs")
    return 0


def cmd_run(args) -> int:
    meta, ops = read_trace(args.trace)
    node_count = int(meta["node_count"])
    cfg = _sim_config(args, node_count)
    row = run_job({"trace": args.trace,
                   "cfg": dataclasses.asdict(cfg),
                   "materialization": args.materialization,
                   "topology_seed": args.topology_seed,
                   "run_seed": args.run_seed})
    append = args.append and os.path.exists(args.out)
    metrics.write_rows(args.out, [row], append=append)
    print(f"{args.materialization} n={node_count} "
          f"phy={row['phy_tx_bytes_total']:.0f}B "
          f"notif={row['notif_success_expected']:.3f} "
          f"download={row['download_success_ratio']:.3f}")
    return 0


def cmd_sweep(args) -> int:
    node_counts = [int(x) for x in args.nodes.split(",")]
    mats = list(MATERIALIZATIONS) if args.materializations == "both" \
        else [args.materializations]
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for n in node_counts:
        trace_path = os.path.join(out_dir, f"trace_{n}_{args.trace_seed}.tsv")
        if not os.path.exists(trace_path):
            tc = TraceConfig(node_count=n, seed=args.trace_seed)
            tc = tc.with_overrides(
                {k: v for k, v in
                 _collect_overrides(args, TraceConfig).items()
                 if k not in ("node_count", "seed")})
            meta, ops = generate_trace(tc)
            write_trace(trace_path, meta, ops)
        cfg = _sim_config(args, n)
        for mat in mats:
            for topo in range(args.topologies):
                for run in range(args.runs):
                    jobs.append({
                        "trace": trace_path,
                        "cfg": dataclasses.asdict(cfg.replace(
                            area_width=area_for(n)[0],
                            area_height=area_for(n)[1])),
                        "materialization": mat,
                        "topology_seed": 1000 + topo,
                        "run_seed": 5000 + topo * args.runs + run,
                    })
    workers = args.workers or max(1, multiprocessing.cpu_count())
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.Pool(workers) as pool:
            rows = pool.map(run_job, jobs)
    else:
        rows = [run_job(job) for job in jobs]
    metrics.write_rows(args.out, rows)
    print(f"wrote {args.out}: {len(rows)} runs")
    return 0


def cmd_aggregate(args) -> int:
    rows = metrics.read_rows(getattr(args, "in"))
    group_keys = args.by.split(",") if args.by else None
    aggregated = metrics.aggregate(rows, group_keys)
    metrics.write_aggregate(args.out, aggregated, group_keys)
    print(f"wrote {args.out}: {len(aggregated)} data points")
    return 0


def cmd_report(args) -> int:
    rows = metrics.read_rows(getattr(args, "in"))
    text = metrics.report_columns(rows, args.x, args.metrics.split(","))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="thyme",
        description="Time-aware publish/subscribe simulation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate a workload trace")
    p.add_argument("--nodes", type=int, default=100)
    p.add_argument("--out", required=True)
    _add_dataclass_flags(p, TraceConfig, skip=("node_count",))
    p.set_defaults(fn=cmd_gen_trace)

    p = sub.add_parser("run", help="run one scenario")
    p.add_argument("--trace", required=True)
    p.add_argument("--materialization", choices=MATERIALIZATIONS,
                   required=True)
    p.add_argument("--topology-seed", type=int, default=1000)
    p.add_argument("--run-seed", type=int, default=5000)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--append", action="store_true")
    _add_dataclass_flags(p, SimConfig)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("sweep", help="run a scenario grid")
    p.add_argument("--nodes", default="36,100",
                   help="comma-separated node counts")
    p.add_argument("--materializations", default="both",
                   choices=("both",) + MATERIALIZATIONS)
    p.add_argument("--topologies", type=int, default=5)
    p.add_argument("--runs", type=int, default=3,
                   help="runs per topology")
    p.add_argument("--trace-seed", type=int, default=12)
    p.add_argument("--workers", type=int, default=0,
                   help="worker processes (0 = cpu count)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="CSV output path")
    _add_dataclass_flags(p, SimConfig)
    _add_dataclass_flags(p, TraceConfig,
                         skip=("node_count", "seed", "ops_start", "ops_end"))
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("aggregate", help="mean/stddev per data point")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--by", help="comma-separated group keys")
    p.set_defaults(fn=cmd_aggregate)

    p = sub.add_parser("report", help="aggregate CSV -> plot columns")
    p.add_argument("--in", required=True)
    p.add_argument("--x", default="node_count")
    p.add_argument("--metrics", default="phy_tx_bytes_total")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, TraceError, ScenarioError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime assertion failures and the like
        import traceback
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
