"""Physical replica assignment: stream partitioning, candidate search, greedy fill."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cost_space import NeighborIndex
from .plan import LogicalPlan, expand_sources, replicate_pairwise
from .virtual import compute_optima

SPREAD_EVEN = "spread_even"
EXPAND_K = "expand_k"
LADDER_RATIO = 2.0          # residual levels of the candidate index ladder
NEED_SCAN = 8               # entries per wanted candidate examined below the need threshold


@dataclass(frozen=True)
class NovaConfig:
    sigma: float | str = 0.4        # fixed scaling factor, or "auto" to derive it from t_b per pair
    t_b: float = math.inf           # per-replica bandwidth threshold (tuples/s)
    c_min: float = 1.0
    k_override: int | None = None
    fallback: str = EXPAND_K
    knn_mode: str = "exact"
    selectivity: float = 1.0
    whole_first: bool = True        # try the unpartitioned replica before splitting streams
    expand_rounds: int | None = None  # k doublings before spreading; None = until no node is left

    def __post_init__(self):
        if self.sigma != "auto" and not 0.0 <= float(self.sigma) <= 1.0:
            raise ValueError("sigma must lie in [0, 1] or be 'auto'")
        if self.fallback not in (SPREAD_EVEN, EXPAND_K):
            raise ValueError(f"unknown fallback {self.fallback!r}")
        if self.k_override is not None and self.k_override < 1:
            raise ValueError("k_override must be >= 1")
        if self.expand_rounds is not None and self.expand_rounds < 1:
            raise ValueError("expand_rounds must be >= 1")


# --- partitioning ------------------------------------------------------------------

def p_max(dr_s, dr_t, sigma):
    """Maximum partition rate for a stream pair."""
    return max(1.0, sigma * 0.5 * (dr_s + dr_t))


def derive_sigma(dr_s, dr_t, t_b):
    """Closed-form minimiser of ``(sigma * 2 * dr_s * dr_t - t_b)^2`` on [0, 1]."""
    if dr_s <= 0 or dr_t <= 0:
        return 1.0
    return min(1.0, max(0.0, t_b / (2.0 * dr_s * dr_t)))


def partition_stream(rate, pmax):
    """Full partitions of ``pmax`` followed by one smaller remainder, if any."""
    if pmax <= 0:
        raise ValueError("p_max must be positive")
    if rate <= pmax:
        return [float(rate)]
    full = int(rate // pmax)
    rem = rate - full * pmax
    parts = [float(pmax)] * full
    if rem > 1e-9 * max(1.0, rate):
        parts.append(float(rem))
    return parts


@dataclass
class PairPartition:
    left: list
    right: list

    @property
    def n_replicas(self):
        return len(self.left) * len(self.right)

    @property
    def replica_rates(self):
        return [a + b for a in self.left for b in self.right]

    @property
    def total_rate(self):
        # every left partition reaches each of the len(right) replicas in its row and vice versa
        return len(self.right) * sum(self.left) + len(self.left) * sum(self.right)


def partition_pair(dr_s, dr_t, sigma) -> PairPartition:
    pm = p_max(dr_s, dr_t, sigma)
    return PairPartition(partition_stream(dr_s, pm), partition_stream(dr_t, pm))


def candidate_k(total_required, capacities, c_min=0.0):
    caps = np.asarray(capacities, dtype=np.float64)
    caps = caps[(caps >= c_min) & (caps > 0)]
    if caps.size == 0:
        raise ValueError("no eligible workers")
    med = float(np.median(caps))
    return int(min(caps.size, max(1, math.ceil(total_required / med))))


class NoCandidatesError(RuntimeError):
    pass


def eligible_mask(residual, c_min):
    return (residual >= c_min) & (residual > 0)


def select_candidates(point, index: NeighborIndex, residual, c_min, k):
    """The ``k`` nodes nearest to ``point`` whose residual capacity is at least ``c_min``."""
    ids, _ = index.knn(point, k, eligible=eligible_mask(np.asarray(residual), c_min))
    if len(ids) == 0:
        raise NoCandidatesError("no node satisfies the availability constraint")
    return [int(v) for v in ids]


# --- placement -----------------------------------------------------------------------

@dataclass
class Group:
    """Sub-replicas of one join pair merged on one node."""

    node: int
    cells: list
    c_r: float


class Placement:
    """Replica-to-node mapping with per-node load bookkeeping."""

    def __init__(self, capacity, strategy="nova", config=None):
        self.capacity = np.array(capacity, dtype=np.float64)
        self.load = np.zeros_like(self.capacity)
        self.residual = self.capacity.copy()
        self.groups = {}            # rid -> [Group]
        self.pinned = {}            # operator key -> node
        self.fallback = set()       # rids that needed the spread-even fallback
        self.strategy = strategy
        self.config = config or {}
        self._hosted = {}           # node -> {rid}

    @property
    def n(self):
        return len(self.capacity)

    def grow(self, n):
        if n > len(self.capacity):
            extra = n - len(self.capacity)
            self.capacity = np.concatenate([self.capacity, np.zeros(extra)])
            self.load = np.concatenate([self.load, np.zeros(extra)])
            self.residual = np.concatenate([self.residual, np.zeros(extra)])

    def set_capacity(self, node, value):
        self.capacity[node] = value
        self.residual[node] = value - self.load[node]

    def assign(self, rid, node, cells, c_r):
        node = int(node)
        groups = self.groups.setdefault(rid, [])
        for g in groups:
            if g.node == node:
                g.cells.extend(cells)
                g.c_r += c_r
                break
        else:
            groups.append(Group(node, list(cells), float(c_r)))
        self.load[node] += c_r
        self.residual[node] -= c_r
        self._hosted.setdefault(node, set()).add(rid)

    def unassign(self, rid):
        groups = self.groups.pop(rid, [])
        for g in groups:
            self.load[g.node] -= g.c_r
            if abs(self.load[g.node]) < 1e-9:
                self.load[g.node] = 0.0
            self.residual[g.node] = self.capacity[g.node] - self.load[g.node]
            hosted = self._hosted.get(g.node)
            if hosted is not None:
                hosted.discard(rid)
                if not hosted:
                    del self._hosted[g.node]
        self.fallback.discard(rid)
        return groups

    def hosted_on(self, node):
        return set(self._hosted.get(int(node), ()))

    def hosts(self):
        return sorted(self._hosted)

    def nodes_of(self, rid):
        return [g.node for g in self.groups.get(rid, ())]

    def overloaded(self, eps=1e-9):
        return [v for v in self.hosts() if self.load[v] > self.capacity[v] + eps]

    def assignments(self):
        """Flat ``(rid, node, c_r, n_sub_replicas)`` rows in rid order."""
        return [(rid, g.node, g.c_r, len(g.cells)) for rid in sorted(self.groups) for g in self.groups[rid]]

    def snapshot(self):
        return {rid: sorted((g.node, round(g.c_r, 9), len(g.cells)) for g in gs) for rid, gs in self.groups.items()}

    def to_dict(self, plan=None, labels=None):
        label = labels or (lambda v: int(v))
        rep_label = (lambda rid: plan.replicas[rid].label) if plan is not None else (lambda rid: rid)
        return {
            "strategy": self.strategy,
            "assignments": [{"replica": rep_label(rid), "node": label(node), "c_r": c_r, "sub_replicas": k}
                            for rid, node, c_r, k in self.assignments()],
            "merged_groups": {str(rep_label(rid)): [label(g.node) for g in gs]
                              for rid, gs in sorted(self.groups.items()) if len(gs) > 0},
            "overloads": [label(v) for v in self.overloaded()],
            "fallback_replicas": [rep_label(r) for r in sorted(self.fallback)],
            "pinned": {f"{k[0]}#{k[1]}": label(v) for k, v in self.pinned.items()},
            "config": self.config,
        }


def place_replicas(rates, candidates, residual, c_min, spread=None):
    """Greedy sequential fill of sub-replicas onto candidates (nearest first).

    ``residual`` is updated in place. Returns ``(assignment, leftover)`` where
    ``assignment[i]`` is a node id or -1 and ``leftover`` lists unplaced indices.
    If ``spread`` is given, leftovers are dealt round-robin over it and
    ``residual`` may go negative.
    """
    assignment = [-1] * len(rates)
    leftover = []
    for idx, c in enumerate(rates):
        for v in candidates:
            r = residual[v]
            if r >= c and r >= c_min and r > 0:
                residual[v] = r - c
                assignment[idx] = v
                break
        else:
            leftover.append(idx)
    if spread and leftover:
        for pos, idx in enumerate(leftover):
            v = spread[pos % len(spread)]
            residual[v] -= rates[idx]
            assignment[idx] = v
        leftover = []
    return assignment, leftover


class PhysicalPlanner:
    """Mutable Phase-III state: residual capacities, neighbour index and placement.

    Used both by the one-shot placement and by incremental re-optimisation.
    """

    def __init__(self, capacity, coords, config: NovaConfig, placement=None, trace=None):
        self.config = config
        self.coords = np.array(coords, dtype=np.float64)
        self.placement = placement or Placement(capacity, strategy="nova", config=_config_echo(config))
        caps = np.asarray(capacity, dtype=np.float64)
        usable = caps[(caps >= config.c_min) & (caps > 0)]
        self.median_capacity = float(np.median(usable)) if usable.size else 0.0
        self.n_eligible = int(usable.size)
        self.trace = trace
        # a ladder of indexes: level j holds the available nodes whose residual is
        # at least levels[j]; level 0 is plain availability
        base = max(config.c_min, 1.0)
        top = float(caps.max()) if caps.size else base
        steps = int(math.log(max(top / base, 1.0)) / math.log(LADDER_RATIO))
        self.levels = np.array([config.c_min] + [base * LADDER_RATIO ** j for j in range(1, max(1, steps) + 1)])
        self.depth = self._depth_of(np.arange(self.placement.n))
        self.ladder = []
        for j in range(len(self.levels)):
            ids = np.flatnonzero(self.depth > j)
            self.ladder.append(NeighborIndex(self.coords[ids], mode=config.knn_mode, ids=ids, d=self.coords.shape[1]))

    @property
    def index(self):
        return self.ladder[0]

    def eligible(self):
        return eligible_mask(self.placement.residual, self.config.c_min)

    def _depth_of(self, nodes):
        """Number of ladder levels a node belongs to (0 when unavailable)."""
        res = self.placement.residual[nodes]
        depth = np.searchsorted(self.levels, res, side="right")
        return np.where(eligible_mask(res, self.config.c_min), depth, 0)

    def refresh(self, nodes):
        """Re-derive availability (and ladder membership) for nodes whose residual changed."""
        nodes = np.asarray(list(nodes), dtype=np.int64)
        for v, new in zip(nodes.tolist(), self._depth_of(nodes).tolist()):
            old = int(self.depth[v])
            for j in range(new, old):
                self.ladder[j].remove(v)
            for j in range(old, new):
                self.ladder[j].add(v, self.coords[v])
            self.depth[v] = new

    def grow(self, n):
        self.placement.grow(n)
        if len(self.coords) < n:
            extra = n - len(self.coords)
            self.coords = np.concatenate([self.coords, np.zeros((extra, self.coords.shape[1]))])
            self.depth = np.concatenate([self.depth, np.zeros(extra, dtype=self.depth.dtype)])

    def move(self, node, point):
        self.coords[node] = point
        for index in self.ladder[: int(self.depth[node])]:
            index.remove(node)
            index.add(node, self.coords[node])

    def assign(self, rid, node, cells, c_r):
        self.placement.assign(rid, node, cells, c_r)
        self.refresh([node])

    def unassign(self, rid):
        groups = self.placement.unassign(rid)
        self.refresh([g.node for g in groups])
        return groups

    def sigma_for(self, a, b):
        if self.config.sigma == "auto":
            return derive_sigma(a, b, self.config.t_b)
        return float(self.config.sigma)

    def k_for(self, total):
        if self.config.k_override is not None:
            return self.config.k_override
        if self.median_capacity <= 0:
            raise NoCandidatesError("no eligible workers")
        return int(min(max(1, self.n_eligible), max(1, math.ceil(total / self.median_capacity))))

    def candidates(self, point, k, need=0.0):
        """``k`` nearest available nodes; with ``need`` also require residual >= need."""
        j = 0
        while j + 1 < len(self.levels) and self.levels[j + 1] <= need:
            j += 1
        if need <= self.levels[j]:
            ids, _ = self.ladder[j].knn(point, k)
            return [int(v) for v in ids]
        # everything one level up qualifies; the current level is only scanned
        # close to the point, where partly filled nodes would otherwise be
        # stepped over again and again
        res = self.placement.residual
        ids, dist = self.ladder[j].knn(point, k, eligible=(res, need), limit=NEED_SCAN * k)
        if j + 1 < len(self.ladder):
            up_ids, up_dist = self.ladder[j + 1].knn(point, k)
            ids, dist = np.concatenate([ids, up_ids]), np.concatenate([dist, up_dist])
            ids, first = np.unique(ids, return_index=True)
            dist = dist[first]
            order = np.lexsort((ids, dist))[:k]
            ids = ids[order]
        return [int(v) for v in ids]

    def nearest_any(self, point, k):
        """Nearest nodes with any capacity at all, ignoring residuals."""
        pool = np.flatnonzero(self.placement.capacity > 0)
        if pool.size == 0:
            pool = np.arange(len(self.placement.capacity))
        d = np.sqrt(((self.coords[pool] - point) ** 2).sum(-1))
        return [int(v) for v in pool[np.lexsort((pool, d))[:k]]]

    def place(self, plan, rid, point):
        """Partition (if needed) and place one join replica; returns the partition used."""
        cfg = self.config
        rep = plan.replicas[rid]
        a, b = rep.left_rate, rep.right_rate
        residual = self.placement.residual
        part = partition_pair(a, b, self.sigma_for(a, b))
        k = self.k_for(part.total_rate)
        rates = part.replica_rates
        # a node that cannot take even the smallest sub-replica violates the compute constraint
        need = min(rates)
        cands = self.candidates(point, k, need)
        if self.trace is not None:
            self.trace.append({"replica": rep.label, "k": k, "candidates": [(v, float(residual[v])) for v in cands]})

        whole = a + b
        if cfg.whole_first and whole <= cfg.t_b:
            for v in cands:
                r = residual[v]
                if r >= whole and r >= cfg.c_min:
                    self.assign(rid, v, [(0, 0)], whole)
                    plan.partitions[rid] = ([a], [b])
                    if self.trace is not None:
                        self.trace.append({"replica": rep.label, "placed": {v: 1}, "partitioned": False})
                    return PairPartition([a], [b])

        cells = [(i, j) for i in range(len(part.left)) for j in range(len(part.right))]
        work = {v: residual[v] for v in cands}
        assignment, leftover = place_replicas(rates, cands, work, cfg.c_min)
        spread = cands
        kk, rounds = max(k, len(cands), 1), 0
        while leftover and cfg.fallback == EXPAND_K and (cfg.expand_rounds is None or rounds < cfg.expand_rounds):
            kk *= 2
            rounds += 1
            # only nodes able to take at least one leftover are worth adding
            wider = self.candidates(point, kk, min(rates[i] for i in leftover))
            for v in wider:
                work.setdefault(v, residual[v])
            sub_rates = [rates[i] for i in leftover]
            more, still = place_replicas(sub_rates, wider, work, cfg.c_min)
            for pos, idx in enumerate(leftover):
                assignment[idx] = more[pos]
            leftover = [leftover[i] for i in still]
            spread = wider or spread
            if len(wider) < kk:
                break       # every eligible node has been tried
        if leftover:
            if not spread:
                # nothing is eligible at all: fall back to the nearest nodes regardless of capacity
                spread = self.nearest_any(point, max(k, 1))
            for pos, idx in enumerate(leftover):
                assignment[idx] = spread[pos % len(spread)]
            self.placement.fallback.add(rid)
        per_node = {}
        for idx, v in enumerate(assignment):
            per_node.setdefault(v, ([], 0.0))
            cl, cr = per_node[v]
            cl.append(cells[idx])
            per_node[v] = (cl, cr + rates[idx])
        fallback = rid in self.placement.fallback
        for v, (cl, cr) in per_node.items():
            self.assign(rid, v, cl, cr)
        plan.partitions[rid] = (list(part.left), list(part.right))
        if self.trace is not None:
            self.trace.append({"replica": rep.label, "placed": {v: len(cl) for v, (cl, _) in per_node.items()},
                               "partitioned": True, "fallback": fallback})
        return part


def _config_echo(config):
    out = asdict(config)
    if out["t_b"] == math.inf:
        out["t_b"] = None
    return out


@dataclass
class NovaResult:
    placement: Placement
    plan: object
    virtual: object
    planner: PhysicalPlanner
    timings: dict = field(default_factory=dict)


def nova_solve(topology, coords, logical_plan: LogicalPlan, matrix, config=NovaConfig(), trace=None) -> NovaResult:
    """Resolve operators, compute virtual optima, then pin or parallelise-and-place."""
    t0 = time.perf_counter()
    expanded = expand_sources(logical_plan, topology)
    pplan = replicate_pairwise(expanded, matrix, selectivity=config.selectivity)
    t1 = time.perf_counter()
    virtual = compute_optima(coords, pplan)
    t2 = time.perf_counter()
    planner = PhysicalPlanner(topology.capacity, coords, config, trace=trace)
    for op in expanded.operators:
        if op.is_pinned:
            planner.placement.pinned[op.key] = op.pinned_node
    for rid in sorted(pplan.replicas):
        planner.place(pplan, rid, virtual.points[rid])
    t3 = time.perf_counter()
    timings = {"resolve_s": t1 - t0, "virtual_s": t2 - t1, "physical_s": t3 - t2}
    return NovaResult(planner.placement, pplan, virtual, planner, timings)


def nova_place(topology, coords, logical_plan, matrix, config=NovaConfig()):
    res = nova_solve(topology, coords, logical_plan, matrix, config)
    return res.placement, res.plan
