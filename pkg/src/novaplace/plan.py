"""Logical plans, join matrices, source expansion and pair-wise join replication."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class OpKind(str, Enum):
    SOURCE = "source"
    JOIN = "join"
    SINK = "sink"


@dataclass(frozen=True)
class StreamRef:
    id: str
    rate: float
    origin: tuple = ()          # (operator id, replica) of the producer

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"stream {self.id} has negative rate")


@dataclass(frozen=True)
class Operator:
    id: str
    kind: OpKind
    replica: int = 1
    rho: int = 1
    inputs: tuple = ()
    outputs: tuple = ()
    pinned_node: int | None = None
    stream_tag: str | None = None   # logical sources only

    def __post_init__(self):
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.kind == OpKind.SOURCE:
            if self.inputs:
                raise ValueError("a source has no inputs")
            if self.pinned_node is None and self.stream_tag is None:
                raise ValueError("a physical source must be pinned")
        if self.kind == OpKind.SINK:
            if self.outputs:
                raise ValueError("a sink has no outputs")
            if self.pinned_node is None:
                raise ValueError("a sink must be pinned")

    @property
    def key(self):
        return (self.id, self.replica)

    @property
    def is_pinned(self):
        return self.pinned_node is not None


def required_capacity(op: Operator) -> float:
    """C_r: the sum of the operator's input data rates."""
    return float(sum(s.rate for s in op.inputs))


@dataclass(frozen=True)
class LogicalPlan:
    operators: tuple

    def __post_init__(self):
        keys = [op.key for op in self.operators]
        if len(set(keys)) != len(keys):
            raise ValueError("operator (id, replica) pairs must be unique")

    @classmethod
    def two_way_join(cls, sink_node, left_tag="left", right_tag="right", join_id="J"):
        left = Operator(id=left_tag, kind=OpKind.SOURCE, stream_tag=left_tag,
                        outputs=(StreamRef(left_tag, 0.0, (left_tag, 1)),))
        right = Operator(id=right_tag, kind=OpKind.SOURCE, stream_tag=right_tag,
                         outputs=(StreamRef(right_tag, 0.0, (right_tag, 1)),))
        out = StreamRef(f"{join_id}.out", 0.0, (join_id, 1))
        join = Operator(id=join_id, kind=OpKind.JOIN, inputs=left.outputs + right.outputs, outputs=(out,))
        sink = Operator(id="sink", kind=OpKind.SINK, inputs=(out,), pinned_node=int(sink_node))
        return cls((left, right, join, sink))

    def by_kind(self, kind):
        return [op for op in self.operators if op.kind == kind]

    @property
    def join(self):
        joins = self.by_kind(OpKind.JOIN)
        if len(joins) != 1:
            raise ValueError("plan must contain exactly one join operator")
        return joins[0]

    @property
    def sink(self):
        return self.by_kind(OpKind.SINK)[0]

    def operators_iter(self):
        return iter(self.operators)


def source_stream(node, rate):
    return StreamRef(f"s{int(node)}", float(rate), (f"src{int(node)}", 1))


def expand_sources(plan: LogicalPlan, topology) -> LogicalPlan:
    """Replace each logical source with one pinned source per physical producer."""
    physical = {}
    new_ops = []
    for op in plan.operators:
        if op.kind != OpKind.SOURCE or op.pinned_node is not None:
            continue
        nodes = topology.sources(op.stream_tag)
        if len(nodes) == 0:
            raise ValueError(f"logical stream {op.stream_tag!r} has no physical sources")
        ops = [Operator(id=f"src{int(v)}", kind=OpKind.SOURCE, pinned_node=int(v),
                        outputs=(source_stream(v, topology.data_rate[v]),))
               for v in nodes]
        physical[op.id] = ops
    for op in plan.operators:
        if op.kind == OpKind.SOURCE and op.id in physical:
            new_ops.extend(physical[op.id])
        elif op.kind == OpKind.SOURCE:
            new_ops.append(op)
        else:
            inputs = []
            for s in op.inputs:
                producer = s.origin[0] if s.origin else None
                if producer in physical:
                    inputs.extend(p.outputs[0] for p in physical[producer])
                else:
                    inputs.append(s)
            new_ops.append(replace(op, inputs=tuple(inputs)))
    return LogicalPlan(tuple(new_ops))


# --- join matrix ---------------------------------------------------------------

@dataclass(frozen=True)
class JoinMatrix:
    """Sparse binary relation: ``pairs[k] = (left source node, right source node)``."""

    left: tuple
    right: tuple
    pairs: tuple

    def __post_init__(self):
        ls, rs = set(self.left), set(self.right)
        for a, b in self.pairs:
            if a not in ls or b not in rs:
                raise ValueError(f"join pair ({a}, {b}) references an unknown source")
        if len(set(self.pairs)) != len(self.pairs):
            raise ValueError("duplicate join pair")

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def from_pairs(cls, pairs, left=None, right=None):
        pairs = tuple((int(a), int(b)) for a, b in pairs)
        left = tuple(sorted({a for a, _ in pairs})) if left is None else tuple(int(x) for x in left)
        right = tuple(sorted({b for _, b in pairs})) if right is None else tuple(int(x) for x in right)
        return cls(left, right, pairs)

    @classmethod
    def dense(cls, left, right):
        left = tuple(int(x) for x in left)
        right = tuple(int(x) for x in right)
        return cls(left, right, tuple((a, b) for a in left for b in right))

    @classmethod
    def one_per_row(cls, topology, seed=0, left_tag=0, right_tag=1):
        """Every left source joins exactly one uniformly chosen right source."""
        rng = np.random.default_rng(seed)
        left = topology.sources(left_tag)
        right = topology.sources(right_tag)
        if len(left) == 0 or len(right) == 0:
            raise ValueError("both logical streams need at least one source")
        partner = right[rng.integers(len(right), size=len(left))]
        return cls(tuple(int(x) for x in left), tuple(int(x) for x in right),
                   tuple(zip(left.tolist(), partner.tolist())))

    def to_dense(self):
        li = {v: i for i, v in enumerate(self.left)}
        ri = {v: i for i, v in enumerate(self.right)}
        out = np.zeros((len(self.left), len(self.right)), dtype=np.int8)
        for a, b in self.pairs:
            out[li[a], ri[b]] = 1
        return out

    def without_source(self, node):
        node = int(node)
        return JoinMatrix(tuple(x for x in self.left if x != node), tuple(x for x in self.right if x != node),
                          tuple(p for p in self.pairs if node not in p))

    def with_pairs(self, pairs, left=(), right=()):
        left_all = tuple(dict.fromkeys(self.left + tuple(int(x) for x in left)))
        right_all = tuple(dict.fromkeys(self.right + tuple(int(x) for x in right)))
        return JoinMatrix(left_all, right_all, self.pairs + tuple((int(a), int(b)) for a, b in pairs))

    def to_dict(self):
        return {"left": list(self.left), "right": list(self.right), "join_pairs": [list(p) for p in self.pairs]}


# --- parallelized plan ------------------------------------------------------------

@dataclass
class JoinReplica:
    """One join replica per join-matrix entry; ``rid`` is stable across re-optimisation."""

    rid: int
    left: int
    right: int
    left_rate: float
    right_rate: float

    @property
    def required_capacity(self):
        return self.left_rate + self.right_rate

    @property
    def label(self):
        return f"j{self.rid + 1}"


@dataclass
class ParallelizedPlan:
    sink: int
    replicas: dict = field(default_factory=dict)        # rid -> JoinReplica
    partitions: dict = field(default_factory=dict)      # rid -> (left rates, right rates)
    selectivity: float = 1.0
    join_id: str = "J"
    next_rid: int = 0

    def add_replica(self, left, right, left_rate, right_rate):
        rep = JoinReplica(self.next_rid, int(left), int(right), float(left_rate), float(right_rate))
        self.replicas[rep.rid] = rep
        self.next_rid += 1
        return rep

    def remove_replica(self, rid):
        self.partitions.pop(rid, None)
        return self.replicas.pop(rid)

    def __len__(self):
        return len(self.replicas)

    @property
    def provenance(self):
        return {rid: (r.left, r.right) for rid, r in self.replicas.items()}

    def sources(self):
        seen = {}
        for r in self.replicas.values():
            seen[r.left] = r.left_rate
            seen[r.right] = r.right_rate
        return seen

    def sub_replicas(self, rid):
        """Sub-replica rows ``(i, j, left_rate_i, right_rate_j)`` for one pair."""
        rep = self.replicas[rid]
        lp, rp = self.partitions.get(rid, ([rep.left_rate], [rep.right_rate]))
        return [(i, j, a, b) for i, a in enumerate(lp) for j, b in enumerate(rp)]

    def operators(self):
        """Materialise the plan as operators (sources, join instances, sink)."""
        ops = []
        for node, rate in sorted(self.sources().items()):
            ops.append(Operator(id=f"src{node}", kind=OpKind.SOURCE, pinned_node=node,
                                outputs=(source_stream(node, rate),)))
        sink_inputs = []
        for rid in sorted(self.replicas):
            rep = self.replicas[rid]
            lp, rp = self.partitions.get(rid, ([rep.left_rate], [rep.right_rate]))
            subs = self.sub_replicas(rid)
            split = len(subs) > 1
            for idx, (i, j, a, b) in enumerate(subs, 1):
                ls = StreamRef(f"s{rep.left}" + (f".{i}" if len(lp) > 1 else ""), a, (f"src{rep.left}", 1))
                rs = StreamRef(f"s{rep.right}" + (f".{j}" if len(rp) > 1 else ""), b, (f"src{rep.right}", 1))
                op_id = f"{self.join_id}.{rid + 1}" if split else self.join_id
                replica_no = idx if split else rid + 1
                out = StreamRef(f"{op_id}#{replica_no}.out", self.selectivity * (a + b), (op_id, replica_no))
                ops.append(Operator(id=op_id, kind=OpKind.JOIN, replica=replica_no,
                                    rho=len(subs) if split else max(1, len(self.replicas)),
                                    inputs=(ls, rs), outputs=(out,)))
                sink_inputs.append(out)
        ops.append(Operator(id="sink", kind=OpKind.SINK, inputs=tuple(sink_inputs), pinned_node=self.sink))
        return ops


def replicate_pairwise(plan: LogicalPlan, matrix: JoinMatrix, selectivity=1.0) -> ParallelizedPlan:
    """One join replica per join-matrix entry, each reading its two source streams."""
    if len(matrix) == 0:
        raise ValueError("join matrix has no joinable pairs")
    rates = {}
    for op in plan.operators:
        if op.kind == OpKind.SOURCE and op.pinned_node is not None:
            rates[op.pinned_node] = op.outputs[0].rate
    missing = {v for p in matrix.pairs for v in p} - set(rates)
    if missing:
        raise ValueError(f"join matrix references unexpanded sources {sorted(missing)[:5]}")
    out = ParallelizedPlan(sink=plan.sink.pinned_node, selectivity=selectivity, join_id=plan.join.id)
    for a, b in matrix.pairs:
        out.add_replica(a, b, rates[a], rates[b])
    return out


def connected_pairs(plan):
    """Producer -> consumer operator pairs, keyed by ``(id, replica)``."""
    ops = plan.operators() if callable(getattr(plan, "operators", None)) else list(plan.operators)
    producers = {}
    for op in ops:
        for s in op.outputs:
            producers.setdefault(s.id, []).append(op)
    out = set()
    for op in ops:
        for s in op.inputs:
            for prod in producers.get(s.id, ()):
                out.add((prod.key, op.key))
            if s.id not in producers and "." in s.id:
                # a partition reads from its parent stream's producer
                for prod in producers.get(s.id.split(".")[0], ()):
                    out.add((prod.key, op.key))
    return out


def plan_to_dict(topology, matrix: JoinMatrix, sink):
    streams = [{"tag": tag, "sources": [int(v) for v in topology.sources(i)]}
               for i, tag in enumerate(topology.tag_names)]
    return {"streams": streams, "join_pairs": [list(p) for p in matrix.pairs], "sink": int(sink)}


def plan_from_dict(doc, topology=None):
    """Parse the plan JSON; node references may be ids or names."""
    resolve = (lambda x: topology.index_of(x) if isinstance(x, str) else int(x)) if topology is not None \
        else (lambda x: int(x))
    streams = doc.get("streams", [])
    tags = [s["tag"] for s in streams]
    left = [resolve(v) for v in streams[0]["sources"]] if streams else None
    right = [resolve(v) for v in streams[1]["sources"]] if len(streams) > 1 else None
    pairs = [(resolve(a), resolve(b)) for a, b in doc["join_pairs"]]
    matrix = JoinMatrix.from_pairs(pairs, left=left, right=right)
    sink = resolve(doc["sink"])
    lp = LogicalPlan.two_way_join(sink, *(tags[:2] if len(tags) >= 2 else ("left", "right")))
    return lp, matrix
