import json

import numpy as np
import pytest

from novaplace.plan import (JoinMatrix, LogicalPlan, OpKind, Operator, StreamRef, connected_pairs, expand_sources,
                            plan_from_dict, plan_to_dict, replicate_pairwise, required_capacity)
from novaplace.topology import Node, Role, Topology, DenseLatency


def tiny_topology(rates=(2.0, 10.0)):
    nodes = [Node(0, Role.SOURCE, 0, rates[0], "left"), Node(1, Role.SOURCE, 0, rates[1], "right"),
             Node(2, Role.WORKER, 100), Node(3, Role.SINK, 0)]
    return Topology.from_nodes(nodes, DenseLatency(np.ones((4, 4)) - np.eye(4)), tag_names=("left", "right"))


def test_expand_running_example(example):
    topo, lp, matrix, _ = example
    ex = expand_sources(lp, topo)
    sources = ex.by_kind(OpKind.SOURCE)
    assert len(sources) == 6
    assert all(op.is_pinned for op in sources)
    assert sorted(topo.label(op.pinned_node) for op in sources) == ["t1", "t2", "t3", "t4", "w1", "w2"]
    assert len(ex.join.inputs) == 6


def test_expand_single_source_per_stream_is_isomorphic():
    topo = tiny_topology()
    lp = LogicalPlan.two_way_join(3)
    ex = expand_sources(lp, topo)
    assert [op.kind for op in ex.operators] == [op.kind for op in lp.operators]
    assert ex.join.inputs[0].rate == 2.0 and ex.join.inputs[1].rate == 10.0


def test_expand_preserves_total_rate(synthetic):
    topo, lp, _, _ = synthetic
    ex = expand_sources(lp, topo)
    total = sum(op.outputs[0].rate for op in ex.by_kind(OpKind.SOURCE))
    assert np.isclose(total, topo.data_rate.sum())
    assert len(ex.by_kind(OpKind.SOURCE)) == len(topo.sources())


def test_expand_needs_physical_sources():
    topo = tiny_topology()
    with pytest.raises(ValueError):
        expand_sources(LogicalPlan.two_way_join(3, "left", "missing"), topo)


def test_replicate_running_example(example):
    topo, lp, matrix, _ = example
    plan = replicate_pairwise(expand_sources(lp, topo), matrix)
    assert [r.label for r in plan.replicas.values()] == ["j1", "j2", "j3", "j4"]
    assert [(topo.label(r.left), topo.label(r.right)) for r in plan.replicas.values()] == [
        ("t1", "w1"), ("t2", "w1"), ("t3", "w2"), ("t4", "w2")]
    assert all(r.required_capacity == 50 for r in plan.replicas.values())


def test_replicate_single_entry():
    topo = tiny_topology()
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(3), topo), JoinMatrix.from_pairs([(0, 1)]))
    assert len(plan) == 1 and plan.replicas[0].required_capacity == 12


def test_replicate_dense_matrix_covers_every_cell():
    left, right = [0, 1, 2], [3, 4]
    nodes = [Node(i, Role.SOURCE, 0, 1.0 + i, "left" if i < 3 else "right") for i in range(5)]
    nodes += [Node(5, Role.SINK, 0)]
    topo = Topology.from_nodes(nodes, DenseLatency(np.zeros((6, 6))), tag_names=("left", "right"))
    m = JoinMatrix.dense(left, right)
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(5), topo), m)
    assert len(plan) == 6 == int(m.to_dense().sum())
    assert sorted(plan.provenance.values()) == sorted((a, b) for a in left for b in right)


def test_replicate_rejects_empty_matrix():
    topo = tiny_topology()
    with pytest.raises(ValueError):
        replicate_pairwise(expand_sources(LogicalPlan.two_way_join(3), topo), JoinMatrix((0,), (1,), ()))


def test_join_matrix_validation():
    with pytest.raises(ValueError):
        JoinMatrix((0,), (1,), ((0, 2),))
    with pytest.raises(ValueError):
        JoinMatrix((0,), (1,), ((0, 1), (0, 1)))


def test_one_per_row(synthetic):
    topo, _, m, _ = synthetic
    dense = m.to_dense()
    assert np.all(dense.sum(1) == 1)


@pytest.mark.parametrize("rates, cr", [((25, 25), 50), ((), 0), ((2, 10), 12)])
def test_required_capacity(rates, cr):
    if rates:
        op = Operator("j", OpKind.JOIN, inputs=tuple(StreamRef(f"s{i}", r) for i, r in enumerate(rates)))
    else:
        op = Operator("s", OpKind.SOURCE, pinned_node=0, outputs=(StreamRef("s", 5.0),))
    assert required_capacity(op) == cr


def test_connected_pairs_single_join():
    topo = tiny_topology()
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(3), topo), JoinMatrix.from_pairs([(0, 1)]))
    assert connected_pairs(plan) == {(("src0", 1), ("J", 1)), (("src1", 1), ("J", 1)), (("J", 1), ("sink", 1))}


def test_connected_pairs_running_example(example):
    topo, lp, matrix, _ = example
    plan = replicate_pairwise(expand_sources(lp, topo), matrix)
    pairs = connected_pairs(plan)
    assert len(pairs) == 12
    # every join replica has degree three
    for op in plan.operators():
        if op.kind == OpKind.JOIN:
            assert sum(op.key in p for p in pairs) == 3


def test_connected_pairs_empty():
    assert connected_pairs(LogicalPlan(())) == set()


def test_partitioned_outputs_cover_the_pair(example):
    topo, lp, matrix, _ = example
    plan = replicate_pairwise(expand_sources(lp, topo), matrix)
    plan.partitions[1] = ([1.0] * 25, [1.0] * 25)
    joins = [op for op in plan.operators() if op.kind == OpKind.JOIN and op.id == "J.2"]
    assert len(joins) == 625
    assert sum(op.outputs[0].rate for op in joins) == 625 * 2
    assert sum(required_capacity(op) for op in joins) >= plan.replicas[1].required_capacity


def test_operator_invariants():
    with pytest.raises(ValueError):
        Operator("k", OpKind.SINK)
    with pytest.raises(ValueError):
        Operator("j", OpKind.JOIN, rho=0)
    with pytest.raises(ValueError):
        LogicalPlan((Operator("k", OpKind.SINK, pinned_node=0), Operator("k", OpKind.SINK, pinned_node=1)))


def test_plan_json_roundtrip(synthetic):
    topo, _, m, _ = synthetic
    doc = json.loads(json.dumps(plan_to_dict(topo, m, topo.sink)))
    lp, back = plan_from_dict(doc, topo)
    assert back.pairs == m.pairs and lp.sink.pinned_node == topo.sink
