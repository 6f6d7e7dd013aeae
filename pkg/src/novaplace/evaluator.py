"""Placement metrics, experiment harness and CSV/JSON reports."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .topology import FEASIBLE_SCALE, UNIFORM_MEAN

ESTIMATED = "estimated"
TRUE = "true"
PERCENTILES = (90.0, 99.0, 99.99)

CSV_FIELDS = ["experiment", "strategy", "n_nodes", "cv", "seed", "overload_pct", "mean_ms", "p90_ms",
              "p99_ms", "delta_vs_sink_ms", "bw_tuples_s", "opt_time_s", "reopt_time_s"]


def overload_percentage(placement, eps=1e-9):
    """Share of hosting nodes whose summed C_r exceeds their capacity, in percent."""
    hosts = placement.hosts()
    if not hosts:
        raise ValueError("placement hosts no replicas")
    return 100.0 * len(placement.overloaded(eps)) / len(hosts)


def distance_fn(mode, topology=None, coords=None):
    """Vectorised ``d(u, v)`` for the requested latency mode."""
    if mode == ESTIMATED:
        if coords is None:
            raise ValueError("estimated mode needs coordinates")
        c = np.asarray(coords)

        def d(u, v):
            diff = c[np.asarray(u)] - c[np.asarray(v)]
            return np.sqrt((diff * diff).sum(-1))
        return d
    if mode == TRUE:
        if topology is None or topology.latency is None:
            raise ValueError("true mode needs a latency source")
        return topology.latency.pairs
    raise ValueError(f"unknown latency mode {mode!r}")


def _group_table(placement, plan):
    rows = [(rid, g.node, len(g.cells)) for rid in sorted(placement.groups) for g in placement.groups[rid]]
    if not rows:
        raise ValueError("placement hosts no replicas")
    rid, host, cells = (np.array(c, dtype=np.int64) for c in zip(*rows))
    missing = set(rid.tolist()) - set(plan.replicas)
    if missing:
        raise KeyError(f"placement references unknown replicas {sorted(missing)[:5]}")
    left = np.array([plan.replicas[r].left for r in rid.tolist()], dtype=np.int64)
    right = np.array([plan.replicas[r].right for r in rid.tolist()], dtype=np.int64)
    return rid, host, cells, left, right


@dataclass
class PairLatency:
    per_pair: dict          # rid -> worst end-to-end latency over its groups
    total: float            # sum over all connected operator pairs


def pair_latency(placement, plan, mode=TRUE, topology=None, coords=None) -> PairLatency:
    """End-to-end latency per join pair plus the summed-edge objective.

    A group's latency is the slower of its two inputs plus the hop to the sink;
    a pair reports its worst group. Every sub-replica contributes its three
    edges to the total.
    """
    d = distance_fn(mode, topology, coords)
    rid, host, cells, left, right = _group_table(placement, plan)
    sink = np.full_like(host, plan.sink)
    dl, dr, ds = d(left, host), d(right, host), d(host, sink)
    if not (np.all(np.isfinite(dl)) and np.all(np.isfinite(dr)) and np.all(np.isfinite(ds))):
        raise ValueError("missing latency entry")
    e2e = np.maximum(dl, dr) + ds
    per = {}
    for r, v in zip(rid.tolist(), e2e.tolist()):
        if v > per.get(r, -math.inf):
            per[r] = v
    return PairLatency(per, float((cells * (dl + dr + ds)).sum()))


def latency_stats(values, percentiles=PERCENTILES):
    """Mean and nearest-rank percentiles."""
    v = np.sort(np.asarray(list(values), dtype=np.float64))
    if v.size == 0:
        raise ValueError("no latencies")
    out = {"mean": float(v.mean())}
    for p in percentiles:
        rank = max(1, math.ceil(p / 100.0 * v.size))
        out[f"p{p:g}"] = float(v[rank - 1])
    return out


def bandwidth_total(placement, plan, selectivity=None):
    """Ingress plus egress tuples/s; edges whose endpoints share a node are free."""
    sel = plan.selectivity if selectivity is None else selectivity
    total = 0.0
    for rid in sorted(placement.groups):
        rep = plan.replicas[rid]
        lp, rp = plan.partitions.get(rid, ([rep.left_rate], [rep.right_rate]))
        for g in placement.groups[rid]:
            for i, j in g.cells:
                c = lp[i] + rp[j]
                if rep.left != g.node:
                    total += lp[i]
                if rep.right != g.node:
                    total += rp[j]
                if g.node != plan.sink:
                    total += sel * c
    return total


def node_ingest(placement):
    """Per hosting node: summed C_r of its replicas."""
    return {v: float(placement.load[v]) for v in placement.hosts()}


@dataclass
class EvalReport:
    strategy: str
    overload_pct: float
    latency: dict
    per_pair: dict
    latency_total: float
    bw_tuples_s: float
    fallback: list
    timings: dict = field(default_factory=dict)
    delta_vs_sink_ms: float | None = None

    def row(self, **extra):
        out = {"strategy": self.strategy, "overload_pct": self.overload_pct, "mean_ms": self.latency["mean"],
               "p90_ms": self.latency["p90"], "p99_ms": self.latency["p99"],
               "delta_vs_sink_ms": self.delta_vs_sink_ms, "bw_tuples_s": self.bw_tuples_s,
               "opt_time_s": self.timings.get("opt_s"), "reopt_time_s": self.timings.get("reopt_s")}
        out.update(extra)
        return out

    def to_dict(self):
        out = asdict(self)
        out["per_pair"] = {str(k): v for k, v in self.per_pair.items()}
        return out


def evaluate(placement, plan, topology=None, coords=None, mode=TRUE, strategy=None, sink_p90=None, timings=None):
    lat = pair_latency(placement, plan, mode, topology, coords)
    stats = latency_stats(lat.per_pair.values())
    rep = EvalReport(strategy=strategy or placement.strategy, overload_pct=overload_percentage(placement),
                     latency=stats, per_pair=lat.per_pair, latency_total=lat.total,
                     bw_tuples_s=bandwidth_total(placement, plan), fallback=sorted(placement.fallback),
                     timings=dict(timings or {}))
    if sink_p90 is not None:
        rep.delta_vs_sink_ms = stats["p90"] - sink_p90
    return rep


# --- experiment harness --------------------------------------------------------------

@dataclass
class ExperimentSpec:
    name: str = "cv_sweep"
    n_nodes: int = 1000
    n_clusters: int = 5
    strategies: tuple = ("nova", "top_c", "source_based", "tree", "cl_sf", "cl_tree_sf", "sink")
    mixture_weights: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)   # 0 = Uniform(1,200), 1 = clamped exponential
    seeds: tuple = (0, 1, 2)
    mode: str = TRUE
    embed_method: str = "vivaldi"
    capacity_scale: float = FEASIBLE_SCALE
    capacity_mean: float | None = UNIFORM_MEAN  # holds total capacity fixed across the sweep
    c_min: float = 1.0
    sigma: float | str = 0.4
    t_b: float = math.inf
    fallback: str = "expand_k"
    cluster_count: int | None = 10          # cluster baselines; None = ceil(sqrt(n))
    topology_file: str | None = None
    plan_file: str | None = None

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        for key in ("strategies", "mixture_weights", "seeds"):
            if key in doc:
                doc[key] = tuple(doc[key])
        if doc.get("t_b") is None:
            doc.pop("t_b", None)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment keys {sorted(unknown)}")
        spec = cls(**doc)
        if not spec.strategies:
            raise ValueError("experiment needs at least one strategy")
        if not spec.seeds:
            raise ValueError("experiment needs at least one seed")
        return spec


def _cell_inputs(spec: ExperimentSpec, weight, seed):
    from .cost_space import EmbedConfig, embed
    from .plan import JoinMatrix, LogicalPlan, plan_from_dict
    from .topology import (CapacityDist, SyntheticSpec, WorkloadSpec, assign_workload, generate_synthetic,
                           load_topology)

    if spec.topology_file:
        topo = load_topology(spec.topology_file)
        lp, matrix = plan_from_dict(json.loads(Path(spec.plan_file).read_text()), topo)
    else:
        base = generate_synthetic(SyntheticSpec(n_nodes=spec.n_nodes, n_clusters=spec.n_clusters, seed=seed))
        topo = assign_workload(base, WorkloadSpec(capacity_dist=CapacityDist.mixture(weight), seed=seed,
                                                  capacity_scale=spec.capacity_scale, c_min=spec.c_min,
                                                  capacity_mean=spec.capacity_mean))
        lp = LogicalPlan.two_way_join(topo.sink, *topo.tag_names)
        matrix = JoinMatrix.one_per_row(topo, seed=seed)
    t0 = time.perf_counter()
    coords = embed(topo, EmbedConfig(seed=seed), method=spec.embed_method)
    return topo, coords, lp, matrix, time.perf_counter() - t0


def run_experiment(spec: ExperimentSpec, out_csv=None, out_json=None, log=None):
    """Every strategy x heterogeneity x seed cell; returns ``(rows, summary)``."""
    from .baselines import run_strategy
    from .physical import NovaConfig
    from .topology import coefficient_of_variation

    config = NovaConfig(sigma=spec.sigma, t_b=spec.t_b, c_min=spec.c_min, fallback=spec.fallback)
    rows, details = [], []
    weights = spec.mixture_weights if not spec.topology_file else (None,)
    for weight in weights:
        for seed in spec.seeds:
            topo, coords, lp, matrix, embed_s = _cell_inputs(spec, weight, seed)
            cv = coefficient_of_variation(topo.capacity)
            reports = {}
            for name in spec.strategies:
                t0 = time.perf_counter()
                placement, plan = run_strategy(name, topo, coords, lp, matrix, config, seed=seed, mode=spec.mode,
                                               n_clusters=spec.cluster_count)
                reports[name] = (placement, plan, time.perf_counter() - t0)
            sink_p90 = None
            if "sink" in reports:
                p, pl, _ = reports["sink"]
                sink_p90 = latency_stats(pair_latency(p, pl, spec.mode, topo, coords).per_pair.values())["p90"]
            for name in spec.strategies:
                p, pl, dt = reports[name]
                rep = evaluate(p, pl, topo, coords, spec.mode, strategy=name, sink_p90=sink_p90,
                               timings={"opt_s": dt, "embed_s": embed_s})
                rows.append(rep.row(experiment=spec.name, n_nodes=topo.n, cv=cv, seed=seed, level=weight))
                details.append({"weight": weight, "seed": seed, **rep.to_dict()})
                if log:
                    log(f"{spec.name} w={weight} seed={seed} {name}: overload={rep.overload_pct:.1f}% "
                        f"p90={rep.latency['p90']:.1f}ms")
    summary = aggregate(rows)
    if out_csv:
        write_csv(rows, out_csv)
    if out_json:
        Path(out_json).write_text(json.dumps({"rows": rows, "summary": summary, "detail": details}, indent=1))
    return rows, summary


def aggregate(rows, keys=("overload_pct", "mean_ms", "p90_ms", "delta_vs_sink_ms", "bw_tuples_s", "opt_time_s")):
    """Mean and population std across seeds, per (strategy, heterogeneity level)."""
    groups = {}
    for r in rows:
        level = r.get("level")
        groups.setdefault((r["strategy"], -1.0 if level is None else level), []).append(r)
    out = []
    for (strategy, level), rs in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        entry = {"strategy": strategy, "level": level, "cv": float(np.mean([r["cv"] for r in rs])), "n": len(rs)}
        for k in keys:
            vals = [r[k] for r in rs if r.get(k) is not None]
            entry[f"{k}_mean"] = float(np.mean(vals)) if vals else None
            entry[f"{k}_std"] = float(np.std(vals)) if vals else None
        out.append(entry)
    return out


def write_csv(rows, path_or_file):
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in CSV_FIELDS})
    finally:
        if own:
            fh.close()


SCALE_FIELDS = ["n_nodes", "strategy", "embed_s", "placement_s", "total_s", "overload_pct", "fallbacks"]
BASELINE_LIMIT = 20_000     # slower baselines are skipped above this size


def scale_benchmark(sizes, seed=0, strategies=("nova",), config=None, baseline_limit=BASELINE_LIMIT, log=None):
    """Embedding and placement wall time per topology size and strategy."""
    from .baselines import run_strategy
    from .cost_space import EmbedConfig, embed
    from .physical import NovaConfig
    from .plan import JoinMatrix, LogicalPlan
    from .topology import SyntheticSpec, assign_workload, feasible_workload, generate_synthetic

    config = config or NovaConfig()
    rows = []
    for n in sizes:
        base = generate_synthetic(SyntheticSpec(n_nodes=int(n), seed=seed))
        topo = assign_workload(base, feasible_workload(seed, sigma=config.sigma, c_min=config.c_min))
        t0 = time.perf_counter()
        coords = embed(topo, EmbedConfig(seed=seed), method="vivaldi")
        embed_s = time.perf_counter() - t0
        lp = LogicalPlan.two_way_join(topo.sink, *topo.tag_names)
        matrix = JoinMatrix.one_per_row(topo, seed=seed)
        for name in strategies:
            if name != "nova" and n > baseline_limit:
                continue
            t0 = time.perf_counter()
            placement, _ = run_strategy(name, topo, coords, lp, matrix, config, seed=seed)
            dt = time.perf_counter() - t0
            rows.append({"n_nodes": int(n), "strategy": name, "embed_s": embed_s, "placement_s": dt,
                         "total_s": embed_s + dt, "overload_pct": overload_percentage(placement),
                         "fallbacks": len(placement.fallback)})
            if log:
                log(f"n={n} {name}: embed {embed_s:.2f}s place {dt:.2f}s")
    return rows


def write_rows(rows, fields, path_or_file):
    """CSV with an explicit column list (benchmark tables)."""
    own = isinstance(path_or_file, (str, Path))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    finally:
        if own:
            fh.close()
