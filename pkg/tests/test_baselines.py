import numpy as np
import pytest

from novaplace.baselines import (LCA, STRATEGIES, cluster_heads, fuzzy_cmeans, latency_graph, lca_bruteforce,
                                 place_cl_sf, place_cl_tree_sf, place_sink, place_source_based, place_top_c,
                                 place_tree, rooted_tree, run_strategy)
from novaplace.evaluator import pair_latency
from novaplace.plan import JoinMatrix, LogicalPlan, expand_sources, replicate_pairwise
from novaplace.topology import DenseLatency, Node, PointLatency, Role, Topology

from conftest import synthetic_case


def example_plan(example):
    topo, lp, matrix, _ = example
    return replicate_pairwise(expand_sources(lp, topo), matrix)


def point_topology(points, roles, rates=None, caps=None, tags=None):
    n = len(points)
    rates = rates or [0.0] * n
    caps = caps or [0.0] * n
    tags = tags or [None] * n
    nodes = [Node(i, roles[i], caps[i], rates[i], tags[i]) for i in range(n)]
    return Topology.from_nodes(nodes, PointLatency(np.asarray(points, float)), tag_names=("left", "right"))


S, W, K = Role.SOURCE, Role.WORKER, Role.SINK


# --- sink and source based -----------------------------------------------------------------

def test_sink_running_example(example):
    topo, _, _, _ = example
    plan = example_plan(example)
    pl = place_sink(topo, plan)
    assert pl.hosts() == [topo.sink] and pl.overloaded() == [topo.sink]
    assert topo.data_rate.sum() == 150
    assert pl.load[topo.sink] == sum(r.required_capacity for r in plan.replicas.values())


def test_sink_single_pair_fits():
    topo = point_topology([[0, 0], [10, 0], [5, 5]], [S, S, K], rates=[3, 4, 0], caps=[0, 0, 10],
                          tags=["left", "right", None])
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(2), topo), JoinMatrix.from_pairs([(0, 1)]))
    assert place_sink(topo, plan).overloaded() == []


def test_sink_latency_is_direct_path(synthetic):
    topo, lp, m, coords = synthetic
    pl, plan = run_strategy("sink", topo, coords, lp, m)
    lat = pair_latency(pl, plan, "true", topo).per_pair
    for rid, r in plan.replicas.items():
        direct = max(topo.latency.get(r.left, plan.sink), topo.latency.get(r.right, plan.sink))
        assert np.isclose(lat[rid], direct)


def test_source_based_picks_the_faster_source():
    topo = point_topology([[0, 0], [10, 0], [5, 5]], [S, S, K], rates=[2, 10, 0], tags=["left", "right", None])
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(2), topo), JoinMatrix.from_pairs([(0, 1)]))
    assert place_source_based(topo, plan).nodes_of(0) == [1]


def test_source_based_tie_goes_to_lower_id(example):
    topo = example[0]
    pl = place_source_based(topo, example_plan(example))
    assert [topo.label(pl.nodes_of(r)[0]) for r in range(4)] == ["t1", "t2", "t3", "t4"]
    assert len(pl.overloaded()) == 4


# --- top-c ----------------------------------------------------------------------------------

def test_top_c_running_example_on_e(example):
    topo = example[0]
    for single in (False, True):
        pl = place_top_c(topo, example_plan(example), single=single)
        assert [topo.label(v) for v in pl.hosts()] == ["E"]


def test_top_c_two_workers():
    topo = point_topology([[0, 0], [10, 0], [3, 3], [6, 3], [5, 5]], [S, S, W, W, K], rates=[3, 4, 0, 0, 0],
                          caps=[0, 0, 5, 500, 0], tags=["left", "right", None, None, None])
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(4), topo), JoinMatrix.from_pairs([(0, 1)]))
    assert place_top_c(topo, plan).nodes_of(0) == [3]


def test_top_c_single_never_spills():
    topo = point_topology([[0, 0], [10, 0], [3, 3], [6, 3], [5, 5]], [S, S, W, W, K], rates=[300, 400, 0, 0, 0],
                          caps=[0, 0, 400, 500, 0], tags=["left", "right", None, None, None])
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(4), topo), JoinMatrix.from_pairs([(0, 1)]))
    pl = place_top_c(topo, plan, single=True)
    assert pl.hosts() == [3] and pl.overloaded() == [3]


def test_top_c_greedy_moves_on_when_the_top_node_fills(synthetic):
    topo, lp, m, coords = synthetic
    plan = replicate_pairwise(expand_sources(lp, topo), m)
    pl = place_top_c(topo, plan)
    assert len(pl.hosts()) > 1
    first = int(np.argmax(topo.capacity))
    assert first in pl.hosts()


# --- trees ------------------------------------------------------------------------------------

def test_tree_on_a_path():
    topo = point_topology([[0, 0], [5, 0], [10, 0]], [S, K, S], rates=[1, 0, 1], tags=["left", None, "right"])
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(1), topo), JoinMatrix.from_pairs([(0, 2)]))
    assert place_tree(topo, plan).nodes_of(0) == [1]


def test_tree_on_a_star():
    pts = [[0, 0], [10, 0], [-10, 0], [0, 10], [0, -10]]
    topo = point_topology(pts, [K, S, S, S, S], rates=[0, 1, 1, 1, 1], tags=[None, "left", "right", "left", "right"])
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(0), topo),
                              JoinMatrix.from_pairs([(1, 2), (3, 4), (1, 4)]))
    pl = place_tree(topo, plan)
    assert pl.hosts() == [0]


@pytest.mark.parametrize("seed", range(5))
def test_lca_matches_root_path_walk(seed):
    rng = np.random.default_rng(seed)
    n = 50
    pts = rng.uniform(0, 100, (n, 2))
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    from novaplace.baselines import _dense_graph
    parent, depth = rooted_tree(_dense_graph(d), int(rng.integers(n)))
    u, v = rng.integers(n, size=(2, 200))
    got = LCA(parent, depth)(u, v)
    assert [lca_bruteforce(parent, a, b) for a, b in zip(u.tolist(), v.tolist())] == got.tolist()


def test_tree_rejects_disconnected_graph():
    d = np.array([[0, 1, np.inf], [1, 0, np.inf], [np.inf, np.inf, 0]])
    topo = Topology.from_nodes([Node(0, S, 0, 1, "left"), Node(1, K, 0), Node(2, S, 0, 1, "right")],
                               DenseLatency(d), tag_names=("left", "right"))
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(1), topo), JoinMatrix.from_pairs([(0, 2)]))
    with pytest.raises(ValueError):
        place_tree(topo, plan)


def test_large_point_topology_uses_sparse_mst():
    topo, lp, m, coords = synthetic_case(4000, seed=0)
    g = latency_graph(topo)
    assert g.nnz < 4000 * 10
    pl, plan = run_strategy("tree", topo, coords, lp, m)
    assert set(pl.groups) == set(plan.replicas)


# --- clustering ----------------------------------------------------------------------------

def two_cluster_topology(sink_between=True):
    rng = np.random.default_rng(0)
    a = rng.normal([0, 0], 1.0, (10, 2))
    b = rng.normal([100, 0], 1.0, (10, 2))
    sink = [[50, 0]] if sink_between else [[0, 1]]
    pts = np.vstack([a, b, sink])
    roles = [S] * 20 + [K]
    tags = (["left", "right"] * 10) + [None]
    return point_topology(pts, roles, rates=[1] * 20 + [0], tags=tags)


def test_fuzzy_cmeans_finds_two_blobs():
    topo = two_cluster_topology()
    centers, u = fuzzy_cmeans(topo.latency.points[:20], 2)
    assert sorted(np.round(centers[:, 0], -1).tolist()) == [0, 100]
    assert np.allclose(u.sum(1), 1)


def test_cl_sf_same_and_different_clusters():
    topo = two_cluster_topology()
    coords = topo.latency.points
    labels, heads = cluster_heads(coords, 2)
    same = (0, 3)       # both in blob a
    cross = (0, 11)     # a and b
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(20), topo), JoinMatrix.from_pairs([same, cross]))
    pl = place_cl_sf(topo, plan, coords, n_clusters=2)
    assert pl.nodes_of(0) == [int(heads[labels[0]])]
    assert pl.nodes_of(1) == [20]


def test_cl_sf_single_cluster():
    topo = two_cluster_topology()
    coords = topo.latency.points
    _, heads = cluster_heads(coords, 1)
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(20), topo),
                              JoinMatrix.from_pairs([(0, 3), (0, 11), (12, 1)]))
    pl = place_cl_sf(topo, plan, coords, n_clusters=1)
    assert pl.hosts() == [int(heads[0])]
    tree = place_cl_tree_sf(topo, plan, coords, n_clusters=1)
    assert tree.snapshot() == pl.snapshot()


def test_cl_tree_sf_meets_at_the_sink_between_heads():
    topo = two_cluster_topology(sink_between=True)
    coords = topo.latency.points
    plan = replicate_pairwise(expand_sources(LogicalPlan.two_way_join(20), topo),
                              JoinMatrix.from_pairs([(0, 11), (0, 3)]))
    labels, heads = cluster_heads(coords, 2)
    pl = place_cl_tree_sf(topo, plan, coords, n_clusters=2)
    assert pl.nodes_of(0) == [20]
    assert pl.nodes_of(1) == [int(heads[labels[0]])]


def test_cluster_count_validation():
    with pytest.raises(ValueError):
        cluster_heads(np.zeros((5, 2)), 0)


# --- shared properties -----------------------------------------------------------------------

@pytest.mark.parametrize("name", STRATEGIES)
def test_every_strategy_places_every_pair(synthetic, name):
    topo, lp, m, coords = synthetic
    pl, plan = run_strategy(name, topo, coords, lp, m)
    assert set(pl.groups) == set(plan.replicas) and len(plan.replicas) == len(m.pairs)
    assert pl.pinned or name == "nova"


@pytest.mark.parametrize("name", ["sink", "source_based", "tree", "cl_sf", "cl_tree_sf"])
def test_baselines_ignore_capacity(synthetic, name):
    topo, lp, m, coords = synthetic
    a, _ = run_strategy(name, topo, coords, lp, m)
    topo2 = Topology(**{**topo.__dict__, "capacity": topo.capacity[::-1].copy()})
    b, _ = run_strategy(name, topo2, coords, lp, m)
    assert {r: [g.node for g in gs] for r, gs in a.groups.items()} == \
        {r: [g.node for g in gs] for r, gs in b.groups.items()}


def test_unknown_strategy(synthetic):
    topo, lp, m, coords = synthetic
    with pytest.raises(ValueError):
        run_strategy("random", topo, coords, lp, m)
