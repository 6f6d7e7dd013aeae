"""Command-line front end: ``novaplace <command> [flags]``.

Exit codes: 0 success, 1 runtime error, 2 usage or validation error.
Logs go to stderr; machine output goes to files or stdout.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from importlib.resources import files
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def log(msg):
    print(msg, file=sys.stderr)


def _threads():
    raw = os.environ.get("NOVA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NOVA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("NOVA_THREADS must be >= 1")
    # kernels are serial; exported so a later numba pool and child processes honour the bound
    for var in ("NUMBA_NUM_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    return n


def _sizes(text):
    try:
        out = [int(float(s)) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad size list {text!r}") from None
    if not out or min(out) < 3:
        raise UsageError("sizes must be a non-empty list of integers >= 3")
    return out


def _synthetic(text):
    """``n=1000,clusters=5,std=8,seed=0`` -> SyntheticSpec keyword arguments."""
    keys = {"n": "n_nodes", "n_nodes": "n_nodes", "clusters": "n_clusters", "n_clusters": "n_clusters",
            "std": "cluster_std", "cluster_std": "cluster_std", "seed": "seed"}
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        k, sep, v = part.partition("=")
        if not sep or k not in keys:
            raise UsageError(f"bad synthetic spec entry {part!r}")
        try:
            out[keys[k]] = float(v) if keys[k] == "cluster_std" else int(v)
        except ValueError:
            raise UsageError(f"bad value in synthetic spec entry {part!r}") from None
    return out


def _out(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# --- commands ------------------------------------------------------------------

def cmd_embed(args):
    from .cost_space import DenseLimitError, EmbedConfig, embed, embedding_error
    from .topology import SyntheticSpec, generate_synthetic, load_latency_matrix

    if (args.latency is None) == (args.synthetic is None):
        raise UsageError("give exactly one of --latency or --synthetic")
    try:
        config = EmbedConfig(d=args.d, m=args.m, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.latency is not None:
        if not Path(args.latency).exists():
            raise UsageError(f"latency file {args.latency} not found")
        latency = load_latency_matrix(args.latency)
    else:
        kw = _synthetic(args.synthetic)
        kw.setdefault("seed", args.seed)
        try:
            latency = generate_synthetic(SyntheticSpec(**kw)).latency
        except ValueError as e:
            raise UsageError(str(e)) from None

    class _Topo:
        pass

    topo = _Topo()
    topo.latency, topo.n = latency, latency.n
    try:
        coords = embed(topo, config, method=args.method)
    except DenseLimitError as e:
        raise UsageError(str(e)) from None
    err = embedding_error(coords, latency, seed=args.seed)
    doc = {"d": int(coords.shape[1]), "method": args.method, "coords": coords.tolist(), "error": err}
    _out(args.out, json.dumps(doc) + "\n")
    log(f"embedded {latency.n} nodes with {args.method}: MAE {err['mae']:.3f} ms, "
        f"median relative error {err['relative_error_median']:.4f}")
    print(json.dumps({"mae": err["mae"], "relative_error_median": err["relative_error_median"]}))


def _load_coords(path, n):
    doc = json.loads(Path(path).read_text())
    coords = np.asarray(doc["coords"] if isinstance(doc, dict) else doc, dtype=np.float64)
    if coords.ndim != 2 or len(coords) != n:
        raise UsageError(f"coordinates cover {len(coords)} nodes, topology has {n}")
    return coords


def cmd_place(args):
    from .baselines import STRATEGIES, run_strategy
    from .cost_space import EmbedConfig, embed
    from .evaluator import evaluate
    from .physical import NovaConfig
    from .plan import plan_from_dict
    from .topology import load_topology

    key = args.strategy.replace("-", "_").lower()
    if key not in STRATEGIES:
        raise UsageError(f"unknown strategy {args.strategy!r}; choose from {', '.join(STRATEGIES)}")
    for flag, path in (("--topology", args.topology), ("--plan", args.plan), ("--coords", args.coords)):
        if path is not None and not Path(path).exists():
            raise UsageError(f"{flag} file {path} not found")
    sigma = args.sigma if args.sigma == "auto" else float(args.sigma)
    try:
        config = NovaConfig(sigma=sigma, c_min=args.cmin, t_b=math.inf if args.tb is None else args.tb,
                            k_override=args.k, fallback=args.fallback)
    except ValueError as e:
        raise UsageError(str(e)) from None
    topo = load_topology(args.topology)
    lp, matrix = plan_from_dict(json.loads(Path(args.plan).read_text()), topo)
    if args.coords is not None:
        coords = _load_coords(args.coords, topo.n)
    else:
        coords = embed(topo, EmbedConfig(seed=args.seed))
    placement, plan = run_strategy(key, topo, coords, lp, matrix, config, seed=args.seed)
    report = evaluate(placement, plan, topo, coords, strategy=key)
    doc = placement.to_dict(plan, labels=topo.label)
    doc["metrics"] = report.to_dict()
    doc["metrics"]["per_pair"] = {plan.replicas[r].label: v for r, v in report.per_pair.items()}
    _out(args.out, json.dumps(doc, indent=1) + "\n")
    metrics = {"strategy": key, "overload_pct": report.overload_pct, "mean_ms": report.latency["mean"],
               "p90_ms": report.latency["p90"], "bw_tuples_s": report.bw_tuples_s,
               "fallback": len(report.fallback)}
    print(json.dumps(metrics))


def cmd_compare(args):
    from .evaluator import ExperimentSpec, run_experiment

    path = Path(args.experiment)
    if not path.exists():
        raise UsageError(f"experiment file {path} not found")
    try:
        spec = ExperimentSpec.from_dict(json.loads(path.read_text()))
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid experiment spec: {e}") from None
    out_csv = args.out if args.out not in (None, "-") else sys.stdout
    run_experiment(spec, out_csv=out_csv, out_json=args.json, log=log)


def cmd_reopt_bench(args):
    from .evaluator import write_rows
    from .reopt import load_events, reopt_benchmark

    sizes = _sizes(args.sizes)
    events = None
    if args.events is not None:
        if not Path(args.events).exists():
            raise UsageError(f"events file {args.events} not found")
        try:
            events = load_events(args.events)
        except (ValueError, KeyError, TypeError) as e:
            raise UsageError(f"invalid events file: {e}") from None
    rows = reopt_benchmark(sizes, seed=args.seed, events=events, repeats=args.repeats, log=log)
    fields = ["n_nodes", "event", "event_time_s", "full_placement_s", "placement_only_s"]
    write_rows(rows, fields, args.out if args.out not in (None, "-") else sys.stdout)


def cmd_scale_bench(args):
    from .evaluator import SCALE_FIELDS, scale_benchmark, write_rows

    sizes = _sizes(args.sizes)
    strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    from .baselines import STRATEGIES
    bad = [s for s in strategies if s.replace("-", "_") not in STRATEGIES]
    if bad or not strategies:
        raise UsageError(f"unknown strategies {bad}" if bad else "empty strategy list")
    rows = scale_benchmark(sizes, seed=args.seed, strategies=strategies, log=log)
    write_rows(rows, SCALE_FIELDS, args.out if args.out not in (None, "-") else sys.stdout)


def running_example():
    """Bundled fixture as ``(topology, logical plan, join matrix)``."""
    from .plan import plan_from_dict
    from .topology import load_topology

    data = files("novaplace") / "data"
    topo = load_topology(data / "running_example.json")
    lp, matrix = plan_from_dict(json.loads((data / "running_example_plan.json").read_text()), topo)
    return topo, lp, matrix


EXAMPLE_CONFIG = dict(sigma=0.0, c_min=15.0, k_override=2, fallback="spread_even")


def cmd_example(args):
    from .baselines import run_strategy
    from .cost_space import EmbedConfig, embed
    from .evaluator import pair_latency
    from .physical import NovaConfig, nova_solve

    topo, lp, matrix = running_example()
    config = NovaConfig(**EXAMPLE_CONFIG)
    p = print
    p("Topology")
    for nd in topo.nodes:
        extra = f" rate={nd.data_rate:g} stream={nd.stream_tag}" if nd.data_rate > 0 else ""
        p(f"  {nd.name:5s} {nd.role.value:7s} capacity={nd.capacity:g}{extra}")
    p("Join pairs")
    for a, b in matrix.pairs:
        p(f"  {topo.label(a)} x {topo.label(b)}")
    coords = embed(topo, EmbedConfig(seed=args.seed), method="mds")
    trace = []
    res = nova_solve(topo, coords, lp, matrix, config, trace=trace)
    p(f"Config: sigma={config.sigma:g} C_min={config.c_min:g} k={config.k_override}")
    p("Virtual optima")
    for rid in sorted(res.plan.replicas):
        pt = res.virtual.points[rid]
        p(f"  {res.plan.replicas[rid].label}: ({', '.join(f'{x:.1f}' for x in pt)})")
    p("Trace")
    for step in trace:
        if "candidates" in step:
            cands = ", ".join(f"{topo.label(v)}({r:g})" for v, r in step["candidates"])
            p(f"  {step['replica']}: k={step['k']} candidates {cands}")
        else:
            placed = ", ".join(f"{topo.label(v)} x{c}" for v, c in step["placed"].items())
            how = "partitioned" if step.get("partitioned", True) else "whole"
            p(f"  {step['replica']}: {how} -> {placed}")
    p("Placement")
    for rid in sorted(res.plan.replicas):
        hosts = "+".join(topo.label(v) for v in res.placement.nodes_of(rid))
        n_sub = sum(len(g.cells) for g in res.placement.groups[rid])
        p(f"  {res.plan.replicas[rid].label} -> {hosts} ({n_sub} sub-replicas)")
    over = [topo.label(v) for v in res.placement.overloaded()]
    p(f"  overloaded: {', '.join(over) if over else 'none'}")
    lat = pair_latency(res.placement, res.plan, "true", topo, coords).per_pair
    cloud, cplan = run_strategy("top_c", topo, coords, lp, matrix, config)
    clat = pair_latency(cloud, cplan, "true", topo, coords).per_pair
    p("End-to-end latency (ms)      nova   top_c")
    for rid in sorted(lat):
        host = topo.label(cloud.nodes_of(rid)[0])
        p(f"  {res.plan.replicas[rid].label:26s} {lat[rid]:6.1f}  {clat[rid]:6.1f} ({host})")


# --- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    ap = _Parser(prog="novaplace", description="Join placement and parallelisation for geo-distributed streams")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("embed", help="embed latencies into a Euclidean cost space")
    e.add_argument("--latency")
    e.add_argument("--synthetic", help="e.g. n=1000,clusters=5,seed=0")
    e.add_argument("--method", choices=("mds", "vivaldi"), default="vivaldi")
    e.add_argument("--m", type=int, default=20)
    e.add_argument("--d", type=int, default=2)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_embed)

    p = sub.add_parser("place", help="place a join plan with one strategy")
    p.add_argument("--topology", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--coords")
    p.add_argument("--strategy", default="nova")
    p.add_argument("--sigma", default="0.4", type=_sigma)
    p.add_argument("--cmin", type=float, default=1.0)
    p.add_argument("--tb", type=float)
    p.add_argument("--k", type=int, help="fixed candidate count")
    p.add_argument("--fallback", choices=("expand_k", "spread_even"), default="expand_k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_place)

    c = sub.add_parser("compare", help="run an experiment spec over all strategies")
    c.add_argument("--experiment", required=True)
    c.add_argument("--out")
    c.add_argument("--json", help="optional per-cell JSON report")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("reopt-bench", help="time re-optimisation events against full placement")
    r.add_argument("--sizes", default="1000,10000")
    r.add_argument("--events")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--repeats", type=int, default=5)
    r.add_argument("--out")
    r.set_defaults(func=cmd_reopt_bench)

    s = sub.add_parser("scale-bench", help="embedding and placement time per topology size")
    s.add_argument("--sizes", default="1000,10000")
    s.add_argument("--strategies", default="nova")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_scale_bench)

    x = sub.add_parser("example", help="walk through the bundled running example")
    x.add_argument("--seed", type=int, default=0)
    x.set_defaults(func=cmd_example)
    return ap


def _sigma(text):
    if text == "auto":
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"sigma must be a number or 'auto', got {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("sigma must lie in [0, 1]")
    return v


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        _threads()
        args.func(args)
    except UsageError as e:
        log(f"error: {e}")
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        log(f"error: {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
