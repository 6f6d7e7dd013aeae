"""Incremental re-optimisation: apply topology and workload changes to a live placement."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cost_space import EmbedConfig, fit_point
from .physical import NovaConfig, nova_solve
from .plan import JoinMatrix
from .topology import ROLE_CODES, Role
from .virtual import compute_optima

SOURCE, WORKER, SINK = ROLE_CODES[Role.SOURCE], ROLE_CODES[Role.WORKER], ROLE_CODES[Role.SINK]


class ReoptError(ValueError):
    pass


# --- events ----------------------------------------------------------------------

@dataclass
class AddWorker:
    probes: list                    # [(node, ms), ...]
    capacity: float = 0.0


@dataclass
class AddSource:
    stream_tag: int | str
    dr: float
    join_partners: list
    probes: list
    capacity: float = 0.0


@dataclass
class RemoveSource:
    node: int


@dataclass
class RemoveWorker:
    node: int


@dataclass
class RemoveJoinNode:
    node: int


@dataclass
class UpdateCoordinates:
    node: int
    probes: list


@dataclass
class ChangeDataRate:
    node: int
    new_dr: float


@dataclass
class ChangeCapacity:
    node: int
    new_ca: float


EVENT_TYPES = {cls.__name__: cls for cls in (AddWorker, AddSource, RemoveSource, RemoveWorker, RemoveJoinNode,
                                             UpdateCoordinates, ChangeDataRate, ChangeCapacity)}


def event_to_dict(ev):
    return {"type": type(ev).__name__, **asdict(ev)}


def event_from_dict(doc):
    doc = dict(doc)
    kind = doc.pop("type", None)
    if kind not in EVENT_TYPES:
        raise ReoptError(f"unknown event type {kind!r}")
    ev = EVENT_TYPES[kind](**doc)
    if hasattr(ev, "probes"):
        ev.probes = [(int(v), float(ms)) for v, ms in ev.probes]
    return ev


def load_events(path):
    with open(path) as fh:
        return [event_from_dict(json.loads(line)) for line in fh if line.strip()]


def save_events(events, path):
    with open(path, "w") as fh:
        for ev in events:
            fh.write(json.dumps(event_to_dict(ev)) + "\n")


# --- state ------------------------------------------------------------------------

@dataclass
class ReoptStats:
    event: str
    replaced: list = field(default_factory=list)     # rids re-placed
    removed: list = field(default_factory=list)      # rids deleted
    added: list = field(default_factory=list)        # rids created
    touched_nodes: set = field(default_factory=set)
    virtual_recomputed: list = field(default_factory=list)
    elapsed_s: float = 0.0


class OptimizerState:
    """Everything the optimiser keeps between events.

    Node columns grow on additions; removed nodes keep their id but are
    marked dead and lose their capacity, which also drops them from the
    availability index.
    """

    def __init__(self, topology, result, config: NovaConfig, embed_config=EmbedConfig()):
        self.topology = topology
        self.config = config
        self.embed_config = embed_config
        self.plan = result.plan
        self.virtual = result.virtual
        self.planner = result.planner
        self.roles = topology.roles.copy()
        self.data_rate = topology.data_rate.copy()
        self.tags = topology.tags.copy()
        self.alive = np.ones(topology.n, dtype=bool)
        self.sink = topology.sink
        self.by_source = {}
        for rid, rep in self.plan.replicas.items():
            self.by_source.setdefault(rep.left, set()).add(rid)
            self.by_source.setdefault(rep.right, set()).add(rid)
        self.full_time_s = sum(result.timings.values())

    @classmethod
    def build(cls, topology, coords, logical_plan, matrix, config=NovaConfig(), embed_config=EmbedConfig()):
        t0 = time.perf_counter()
        result = nova_solve(topology, coords, logical_plan, matrix, config)
        state = cls(topology, result, config, embed_config)
        state.full_time_s = time.perf_counter() - t0
        return state

    @property
    def placement(self):
        return self.planner.placement

    @property
    def coords(self):
        return self.planner.coords[: self.n]

    @property
    def index(self):
        return self.planner.index

    @property
    def n(self):
        return len(self.roles)

    @property
    def matrix(self):
        left = sorted(int(v) for v in np.flatnonzero(self.alive & (self.roles == SOURCE) & (self.tags == 0)))
        right = sorted(int(v) for v in np.flatnonzero(self.alive & (self.roles == SOURCE) & (self.tags == 1)))
        pairs = [(r.left, r.right) for _, r in sorted(self.plan.replicas.items())]
        return JoinMatrix.from_pairs(pairs, left=left, right=right)

    def check(self):
        """Internal consistency: live references and residuals that match assignments."""
        pl = self.placement
        load = np.zeros(self.n)
        for rid, groups in pl.groups.items():
            if rid not in self.plan.replicas:
                raise AssertionError(f"placement has unknown replica {rid}")
            rep = self.plan.replicas[rid]
            if not (self.alive[rep.left] and self.alive[rep.right]):
                raise AssertionError(f"replica {rid} reads from a removed source")
            for g in groups:
                if not self.alive[g.node]:
                    raise AssertionError(f"replica {rid} sits on removed node {g.node}")
                load[g.node] += g.c_r
        if set(pl.groups) != set(self.plan.replicas):
            raise AssertionError("some replicas are unplaced")
        if not np.allclose(load, pl.load[: self.n], atol=1e-6):
            raise AssertionError("load bookkeeping drifted")
        if not np.allclose(pl.residual[: self.n], pl.capacity[: self.n] - pl.load[: self.n], atol=1e-6):
            raise AssertionError("residual bookkeeping drifted")
        return True


# --- helpers -----------------------------------------------------------------------------

def _probe_point(state, probes, exclude=None, start=None):
    probes = [(int(v), float(ms)) for v, ms in probes if int(v) != exclude]
    if not probes:
        raise ReoptError("empty probe set")
    for v, ms in probes:
        if not (0 <= v < state.n and state.alive[v]):
            raise ReoptError(f"probe references unknown node {v}")
        if not ms >= 0:
            raise ReoptError("probe latencies must be non-negative")
    ids = np.array([v for v, _ in probes])
    return fit_point(state.planner.coords[ids], np.array([ms for _, ms in probes]), start=start)


def _require_node(state, node):
    node = int(node)
    if not (0 <= node < state.n) or not state.alive[node]:
        raise ReoptError(f"node {node} does not exist")
    return node


def _replace(state, rids, stats):
    """Undeploy ``rids`` and run physical placement for them again, in rid order."""
    rids = sorted(rids)
    for rid in rids:
        for g in state.planner.unassign(rid):
            stats.touched_nodes.add(g.node)
    for rid in rids:
        state.planner.place(state.plan, rid, state.virtual.points[rid])
        stats.touched_nodes.update(state.placement.nodes_of(rid))
    stats.replaced.extend(rids)


def _new_node(state, role, point, capacity, rate=0.0, tag=-1):
    nid = state.n
    state.roles = np.append(state.roles, np.int8(role))
    state.data_rate = np.append(state.data_rate, rate)
    state.tags = np.append(state.tags, np.int8(tag))
    state.alive = np.append(state.alive, True)
    state.planner.grow(nid + 1)
    state.planner.coords[nid] = point
    state.placement.set_capacity(nid, capacity)
    state.planner.refresh([nid])
    return nid


def _kill(state, node):
    state.alive[node] = False
    state.placement.set_capacity(node, 0.0)
    state.planner.refresh([node])


def _drop_replica(state, rid, stats):
    rep = state.plan.replicas[rid]
    for g in state.planner.unassign(rid):
        stats.touched_nodes.add(g.node)
    state.plan.remove_replica(rid)
    state.virtual.points.pop(rid, None)
    state.virtual.objective.pop(rid, None)
    for src in (rep.left, rep.right):
        hit = state.by_source.get(src)
        if hit is not None:
            hit.discard(rid)
    stats.removed.append(rid)


def _tag_index(state, tag):
    if isinstance(tag, str):
        names = list(state.topology.tag_names)
        if tag not in names:
            raise ReoptError(f"unknown stream tag {tag!r}")
        return names.index(tag)
    if tag not in (0, 1):
        raise ReoptError(f"unknown stream tag {tag!r}")
    return int(tag)


def _recompute_virtual(state, rids, stats):
    if not rids:
        return
    vp = compute_optima(state.planner.coords, state.plan, rids)
    state.virtual.points.update(vp.points)
    state.virtual.objective.update(vp.objective)
    stats.virtual_recomputed.extend(sorted(rids))


# --- event handlers ----------------------------------------------------------------------

def _add_worker(state, ev, stats):
    point = _probe_point(state, ev.probes)
    nid = _new_node(state, WORKER, point, float(ev.capacity))
    stats.touched_nodes.add(nid)


def _add_source(state, ev, stats):
    tag = _tag_index(state, ev.stream_tag)
    if not ev.dr > 0:
        raise ReoptError("a source needs a positive data rate")
    partners = [_require_node(state, p) for p in ev.join_partners]
    for p in partners:
        if state.roles[p] != SOURCE or state.tags[p] != 1 - tag:
            raise ReoptError(f"join partner {p} is not a source of the opposite stream")
    point = _probe_point(state, ev.probes)
    nid = _new_node(state, SOURCE, point, float(ev.capacity), rate=float(ev.dr), tag=tag)
    stats.touched_nodes.add(nid)
    new = []
    for p in partners:
        left, right = (nid, p) if tag == 0 else (p, nid)
        rep = state.plan.add_replica(left, right, state.data_rate[left], state.data_rate[right])
        state.by_source.setdefault(left, set()).add(rep.rid)
        state.by_source.setdefault(right, set()).add(rep.rid)
        new.append(rep.rid)
    _recompute_virtual(state, new, stats)
    for rid in new:
        state.planner.place(state.plan, rid, state.virtual.points[rid])
        stats.touched_nodes.update(state.placement.nodes_of(rid))
    stats.added.extend(new)


def _remove_source(state, ev, stats):
    node = _require_node(state, ev.node)
    if state.roles[node] != SOURCE:
        raise ReoptError(f"node {node} is not a source")
    for rid in sorted(state.by_source.pop(node, set())):
        _drop_replica(state, rid, stats)
    hosted = state.placement.hosted_on(node)
    _kill(state, node)
    stats.touched_nodes.add(node)
    _replace(state, hosted, stats)


def _remove_node(state, ev, stats):
    node = _require_node(state, ev.node)
    if node == state.sink:
        raise ReoptError("the sink cannot be removed")
    if state.roles[node] == SOURCE:
        raise ReoptError(f"node {node} is a source; use RemoveSource")
    hosted = state.placement.hosted_on(node)
    _kill(state, node)
    stats.touched_nodes.add(node)
    _replace(state, hosted, stats)


def _update_coordinates(state, ev, stats):
    node = _require_node(state, ev.node)
    # fresh probes, with the fit started from where the node was
    point = _probe_point(state, ev.probes, exclude=node, start=state.planner.coords[node])
    state.planner.move(node, point)
    stats.touched_nodes.add(node)
    anchored = set(state.plan.replicas) if node == state.sink else set(state.by_source.get(node, ()))
    _recompute_virtual(state, anchored, stats)
    _replace(state, anchored | state.placement.hosted_on(node), stats)


def _change_data_rate(state, ev, stats):
    node = _require_node(state, ev.node)
    if state.roles[node] != SOURCE:
        raise ReoptError(f"node {node} is not a source")
    if not ev.new_dr > 0:
        raise ReoptError("data rate must be positive")
    if float(ev.new_dr) == float(state.data_rate[node]):
        return
    state.data_rate[node] = float(ev.new_dr)
    rids = state.by_source.get(node, set())
    for rid in rids:
        rep = state.plan.replicas[rid]
        if rep.left == node:
            rep.left_rate = float(ev.new_dr)
        else:
            rep.right_rate = float(ev.new_dr)
    _replace(state, rids, stats)


def _change_capacity(state, ev, stats):
    node = _require_node(state, ev.node)
    if not ev.new_ca >= 0:
        raise ReoptError("capacity must be non-negative")
    hosted = state.placement.hosted_on(node)
    for rid in sorted(hosted):
        for g in state.planner.unassign(rid):
            stats.touched_nodes.add(g.node)
    state.placement.set_capacity(node, float(ev.new_ca))
    state.planner.refresh([node])
    stats.touched_nodes.add(node)
    _replace(state, hosted, stats)


HANDLERS = {
    AddWorker: _add_worker, AddSource: _add_source, RemoveSource: _remove_source,
    RemoveWorker: _remove_node, RemoveJoinNode: _remove_node, UpdateCoordinates: _update_coordinates,
    ChangeDataRate: _change_data_rate, ChangeCapacity: _change_capacity,
}


def apply_event(state: OptimizerState, event):
    """Apply one change in place; returns ``(state, ReoptStats)``.

    Validation happens before any mutation, so a rejected event leaves the
    state untouched.
    """
    handler = HANDLERS.get(type(event))
    if handler is None:
        raise ReoptError(f"unsupported event {event!r}")
    stats = ReoptStats(type(event).__name__)
    t0 = time.perf_counter()
    handler(state, event, stats)
    stats.elapsed_s = time.perf_counter() - t0
    return state, stats


# --- benchmark -------------------------------------------------------------------------------

BENCH_EVENTS = ("AddSource", "RemoveSource", "RemoveWorker", "UpdateCoordinates", "ChangeDataRate")


def _probes_for(state, rng, truth_point, truth_points, m):
    live = np.flatnonzero(state.alive)
    ids = rng.choice(live, size=min(m, len(live)), replace=False)
    lat = np.sqrt(((truth_points[ids] - truth_point) ** 2).sum(-1))
    return [(int(v), float(ms)) for v, ms in zip(ids, lat)]


def benchmark_events(state, truth_points, seed=0, m=20):
    """One instance of each benchmark event, chosen at random from the current state.

    Returns ``(events, new_points)``; ``new_points`` holds the ground-truth
    location of every node the events add, in order.
    """
    rng = np.random.default_rng(seed)
    pick = lambda mask: int(rng.choice(np.flatnonzero(mask & state.alive)))  # noqa: E731
    sources = state.roles == SOURCE
    workers = (state.roles == WORKER) & (state.placement.capacity[: state.n] > 0)
    lo, hi = truth_points.min(0), truth_points.max(0)
    new_point = rng.uniform(lo, hi)
    partner = pick(sources & (state.tags == 1))
    add = AddSource(0, float(rng.uniform(1, 200)), [partner], _probes_for(state, rng, new_point, truth_points, m))
    victim = pick(sources & np.isin(np.arange(state.n), list(state.by_source)))
    worker = pick(workers)
    mover = pick(workers)
    moved = truth_points[mover] + rng.normal(0, 2.0, size=truth_points.shape[1])
    upd = UpdateCoordinates(mover, _probes_for(state, rng, moved, truth_points, m))
    rate_src = pick(sources & np.isin(np.arange(state.n), list(state.by_source)))
    evs = [add, RemoveSource(victim), RemoveWorker(worker), upd,
           ChangeDataRate(rate_src, float(state.data_rate[rate_src]) * 1.5)]
    return evs, [new_point]


def reopt_benchmark(sizes, seed=0, events=None, config=NovaConfig(), repeats=5, log=None):
    """Per-size full-placement time and per-event re-optimisation time.

    ``events`` is an optional fixed event list (for instance a replayed
    script); by default each repeat draws one instance of each of the five
    benchmark events. Repeats act on the same evolving state and the reported
    time per event type is the median.
    """
    from .cost_space import embed
    from .plan import LogicalPlan
    from .topology import SyntheticSpec, assign_workload, feasible_workload, generate_synthetic

    rows = []
    for n in sizes:
        base = generate_synthetic(SyntheticSpec(n_nodes=n, seed=seed))
        topo = assign_workload(base, feasible_workload(seed, sigma=config.sigma, c_min=config.c_min))
        t0 = time.perf_counter()
        coords = embed(topo, EmbedConfig(seed=seed), method="vivaldi")
        embed_s = time.perf_counter() - t0
        lp = LogicalPlan.two_way_join(topo.sink, *topo.tag_names)
        matrix = JoinMatrix.one_per_row(topo, seed=seed)
        state = OptimizerState.build(topo, coords, lp, matrix, config)
        full_s = embed_s + state.full_time_s
        truth = base.ground_truth
        times = {}
        for rep in range(repeats):
            if events is None:
                evs, new_points = benchmark_events(state, truth, seed=seed + rep)
                truth = np.vstack([truth, new_points])
            else:
                if rep:
                    break
                evs = list(events)
            for ev in evs:
                _, st = apply_event(state, ev)
                times.setdefault(st.event, []).append(st.elapsed_s)
        for name, ts in times.items():
            rows.append({"n_nodes": n, "event": name, "event_time_s": float(np.median(ts)),
                         "full_placement_s": full_s, "placement_only_s": state.full_time_s})
            if log:
                log(f"n={n} {name}: {np.median(ts) * 1e3:.2f} ms (full {full_s:.2f} s)")
    return rows
