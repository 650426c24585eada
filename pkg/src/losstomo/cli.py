"""Command line entry point: ``losstomo <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .analysis import efficiency_order, subtree_pass_rates
from .estimators import EstimatorSpec, TreePolicy, estimate, estimate_tree, estimates_to_csv
from .harness import DEFAULT_MASTER_SEED, load_config, reproduce_table, run_experiment, select_and_estimate
from .observation import SeedSpec, export_trace, ingest, simulate
from .statistics import SubsetId, build_stats
from .topology import read_topology


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _read_trace(path: str, topo):
    return ingest(Path(path).read_text(encoding="utf-8"), topo.receivers)


def cmd_simulate(args) -> None:
    t = read_topology(args.topology)
    obs = simulate(t, args.n, SeedSpec(args.seed, args.replication))
    _emit(export_trace(obs), args.output)


def cmd_estimate(args) -> None:
    t = read_topology(args.topology)
    obs = _read_trace(args.trace, t)
    if args.node is None:
        policy = TreePolicy(args.family, args.degree, args.choose)
        _emit(estimate_tree(obs, t, policy).to_csv(), args.output)
        return
    specs = [EstimatorSpec.parse(s, args.node) for s in args.spec.split(",")]
    degree = max((s.degree or 1) for s in specs)
    st = build_stats(obs, t, args.node, min(degree, len(t.children[args.node])))
    _emit(estimates_to_csv(estimate(st, s) for s in specs), args.output)


def cmd_analyze(args) -> None:
    t = read_topology(args.topology)
    k = args.node
    kids = t.children.get(k)
    if not kids:
        raise ValueError(f"node {k} is not an internal node")
    if args.candidates:
        cands = [EstimatorSpec.parse(s, k) for s in args.candidates.split(",")]
    else:
        from itertools import combinations

        cands = [EstimatorSpec.parse("mle", k)]
        cands += [EstimatorSpec("ibe", k, subset=SubsetId(k, c)) for c in combinations(kids, 2)]
    A = t.path_rates()[k]
    report = efficiency_order(k, cands, A, subtree_pass_rates(t, k), n=args.n)
    _emit(report.to_csv(), args.output)


def cmd_select(args) -> None:
    t = read_topology(args.topology)
    obs = _read_trace(args.trace, t)
    degrees = [int(d) for d in args.degrees.split(",")]
    sel = select_and_estimate(obs, t, args.node, args.families.split(","), degrees)
    _emit(sel.summary(), args.output)


def cmd_reproduce(args) -> None:
    kw = {}
    if args.sizes:
        kw["sample_sizes"] = [int(s) for s in args.sizes.split(",")]
    rep = reproduce_table(
        args.table,
        master_seed=args.seed,
        replications=args.replications,
        output=args.output,
        workers=args.workers,
        **kw,
    )
    if args.output:
        sys.stdout.write(rep.comparison_text())
    else:
        sys.stdout.write(rep.table.to_csv())


def cmd_experiment(args) -> None:
    path = Path(args.config)
    cfg = load_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
    table = run_experiment(cfg, workers=args.workers)
    sys.stdout.write(table.to_text() if cfg.output else table.to_csv())


def cmd_stats(args) -> None:
    t = read_topology(args.topology)
    obs = _read_trace(args.trace, t)
    _emit(build_stats(obs, t, args.node, args.max_degree).to_csv(), args.output)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="losstomo", description="Multicast loss tomography on trees.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate probes and write a trace CSV")
    s.add_argument("--topology", required=True)
    s.add_argument("-n", type=int, required=True, help="number of probes")
    s.add_argument("--seed", type=int, default=DEFAULT_MASTER_SEED)
    s.add_argument("--replication", type=int, default=0)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", help="estimate path pass rates from a trace")
    s.add_argument("--trace", required=True)
    s.add_argument("--topology", required=True)
    s.add_argument("--node", type=int, help="single node; omit to estimate the whole tree")
    s.add_argument("--spec", default="mle", help="comma list: mle, bwe:2, rse:2+3+4, ibe:2+3")
    s.add_argument("--family", default="mle", choices=["mle", "bwe", "rse", "ibe"], help="whole-tree policy")
    s.add_argument("--degree", type=int, default=2)
    s.add_argument("--choose", default="best", choices=["best", "first"])
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("analyze", help="variance report from the topology's true rates")
    s.add_argument("--topology", required=True)
    s.add_argument("--node", type=int, required=True)
    s.add_argument("--candidates", help="comma list of specs; default mle and every IBE pair")
    s.add_argument("-n", type=int, default=1, help="probe count for predicted variances")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("select", help="pick the lowest-variance estimator and run it")
    s.add_argument("--trace", required=True)
    s.add_argument("--topology", required=True)
    s.add_argument("--node", type=int, required=True)
    s.add_argument("--families", default="ibe")
    s.add_argument("--degrees", default="2")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("reproduce", help="rerun one of the published simulation tables")
    s.add_argument("--table", type=int, required=True, choices=[2, 3, 4])
    s.add_argument("--seed", type=int, default=DEFAULT_MASTER_SEED)
    s.add_argument("--replications", type=int, default=20)
    s.add_argument("--sizes", help="comma list of sample sizes")
    s.add_argument("--output", help="directory for CSV and comparison text")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_reproduce)

    s = sub.add_parser("experiment", help="run a configured replication grid")
    s.add_argument("--config", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("stats", help="dump subset counts for one node")
    s.add_argument("--trace", required=True)
    s.add_argument("--topology", required=True)
    s.add_argument("--node", type=int, required=True)
    s.add_argument("--max-degree", type=int, default=2)
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, KeyError, OSError, ZeroDivisionError) as exc:
        print(f"losstomo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
