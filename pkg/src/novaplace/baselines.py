"""Comparison strategies: sink, source-based, top-c, tree and two cluster-based variants."""
from __future__ import annotations

import heapq
import math

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import Delaunay, cKDTree

from .physical import Placement, nova_place
from .plan import expand_sources, replicate_pairwise
from .topology import PointLatency

STRATEGIES = ("nova", "sink", "source_based", "top_c", "tree", "cl_sf", "cl_tree_sf")
DENSE_MST_LIMIT = 3000
_EDGE_EPS = 1e-9      # keeps zero-latency edges alive in sparse graphs


def _fixed(topology, plan, hosts, strategy):
    """Placement with every replica unpartitioned on ``hosts[rid]``."""
    pl = Placement(topology.capacity, strategy=strategy)
    for rid in sorted(plan.replicas):
        pl.assign(rid, int(hosts[rid]), [(0, 0)], plan.replicas[rid].required_capacity)
    pl.pinned = {("sink", 1): plan.sink}
    return pl


def place_sink(topology, plan):
    return _fixed(topology, plan, {rid: plan.sink for rid in plan.replicas}, "sink")


def place_source_based(topology, plan):
    """Each pair on whichever of its two sources emits more; lower id wins ties."""
    hosts = {}
    for rid, r in plan.replicas.items():
        if r.left_rate != r.right_rate:
            hosts[rid] = r.left if r.left_rate > r.right_rate else r.right
        else:
            hosts[rid] = min(r.left, r.right)
    return _fixed(topology, plan, hosts, "source_based")


def place_top_c(topology, plan, single=False):
    """Pairs go, whole, to the node with the highest remaining capacity.

    With ``single`` every pair lands on the initially largest node instead.
    """
    cap = np.asarray(topology.capacity, dtype=np.float64)
    if single:
        best = int(np.argmax(cap))
        return _fixed(topology, plan, {rid: best for rid in plan.replicas}, "top_c")
    heap = [(-c, v) for v, c in enumerate(cap.tolist())]
    heapq.heapify(heap)
    hosts = {}
    for rid in sorted(plan.replicas):
        neg, v = heapq.heappop(heap)
        hosts[rid] = v
        heapq.heappush(heap, (neg + plan.replicas[rid].required_capacity, v))
    return _fixed(topology, plan, hosts, "top_c")


# --- spanning trees ----------------------------------------------------------------------

def _points_graph(points):
    n = len(points)
    if n <= DENSE_MST_LIMIT or points.shape[1] < 2:
        diff = points[:, None, :] - points[None, :, :]
        return _dense_graph(np.sqrt((diff * diff).sum(-1)))
    tri = Delaunay(points)
    s = tri.simplices
    k = s.shape[1]
    a = np.concatenate([s[:, i] for i in range(k) for j in range(i + 1, k)])
    b = np.concatenate([s[:, j] for i in range(k) for j in range(i + 1, k)])
    # duplicate points are left out of the triangulation; tie them to their nearest vertex
    if len(tri.coplanar):
        a = np.concatenate([a, tri.coplanar[:, 0]])
        b = np.concatenate([b, tri.coplanar[:, 2]])
    w = np.sqrt(((points[a] - points[b]) ** 2).sum(-1)) + _EDGE_EPS
    return coo_matrix((w, (a, b)), shape=(n, n)).tocsr()


def _dense_graph(matrix):
    m = np.asarray(matrix, dtype=np.float64) + _EDGE_EPS
    m[~np.isfinite(m)] = 0.0    # unreachable pairs carry no edge
    np.fill_diagonal(m, 0.0)
    return csr_matrix(m)


def latency_graph(topology, coords=None, mode="true", nodes=None):
    """Weighted graph over ``nodes`` (default: all) for MST construction."""
    idx = np.arange(topology.n) if nodes is None else np.asarray(nodes)
    if mode == "estimated":
        return _points_graph(np.asarray(coords, dtype=np.float64)[idx])
    lat = topology.latency
    if isinstance(lat, PointLatency):
        return _points_graph(lat.points[idx])
    if nodes is None:
        return _dense_graph(lat.to_dense())
    return _dense_graph(lat.pairs(idx[:, None], idx[None, :]))


def rooted_tree(graph, root):
    """MST of ``graph`` rooted at ``root``: ``(parent, depth)``; the root is its own parent."""
    n = graph.shape[0]
    mst = minimum_spanning_tree(graph)
    if connected_components(mst, directed=False)[0] != 1:
        raise ValueError("latency graph is disconnected")
    order, pred = breadth_first_order(mst, root, directed=False, return_predecessors=True)
    parent = pred.astype(np.int64)
    parent[root] = root
    depth = np.zeros(n, dtype=np.int64)
    for v in order[1:]:
        depth[v] = depth[parent[v]] + 1
    return parent, depth


class LCA:
    """Binary-lifting lowest common ancestor on a rooted parent array."""

    def __init__(self, parent, depth):
        self.depth = np.asarray(depth)
        levels = max(1, int(self.depth.max()).bit_length())
        up = [np.asarray(parent)]
        for _ in range(levels - 1):
            up.append(up[-1][up[-1]])
        self.up = up

    def __call__(self, u, v):
        u = np.array(u, dtype=np.int64, copy=True)
        v = np.array(v, dtype=np.int64, copy=True)
        swap = self.depth[u] < self.depth[v]
        u[swap], v[swap] = v[swap], u[swap]
        diff = self.depth[u] - self.depth[v]
        for k, up in enumerate(self.up):
            bit = (diff >> k) & 1 == 1
            u[bit] = up[u[bit]]
        for up in reversed(self.up):
            move = up[u] != up[v]
            u[move] = up[u[move]]
            v[move] = up[v[move]]
        return np.where(u == v, u, self.up[0][u])


def lca_bruteforce(parent, u, v):
    """Walk both root paths and return the first shared node."""
    seen = {u}
    while parent[u] != u:
        u = int(parent[u])
        seen.add(u)
    while v not in seen:
        v = int(parent[v])
    return v


def place_tree(topology, plan, coords=None, mode="true"):
    """Join each pair where its two root-ward paths meet in the sink-rooted MST."""
    parent, depth = rooted_tree(latency_graph(topology, coords, mode), plan.sink)
    rids = sorted(plan.replicas)
    left = [plan.replicas[r].left for r in rids]
    right = [plan.replicas[r].right for r in rids]
    meet = LCA(parent, depth)(left, right)
    return _fixed(topology, plan, dict(zip(rids, meet.tolist())), "tree")


# --- clustering ---------------------------------------------------------------------------

def fuzzy_cmeans(x, c, m=2.0, max_iter=150, tol=1e-6, seed=0):
    """Fuzzy c-means; returns ``(centers, memberships)``."""
    x = np.asarray(x, dtype=np.float64)
    if c < 1:
        raise ValueError("need at least one cluster")
    c = min(c, len(x))
    rng = np.random.default_rng(seed)
    centers = x[rng.choice(len(x), size=c, replace=False)].copy()
    expo = 2.0 / (m - 1.0)
    u = None
    for _ in range(max_iter):
        d = np.sqrt(((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)) + 1e-12
        inv = d ** -expo
        u = inv / inv.sum(1, keepdims=True)
        um = u ** m
        nxt = um.T @ x / um.sum(0)[:, None]
        shift = float(np.abs(nxt - centers).max())
        centers = nxt
        if shift < tol:
            break
    return centers, u


def cluster_heads(coords, n_clusters=None, seed=0):
    """Hard labels from fuzzy memberships plus, per cluster, the node closest to its centre."""
    coords = np.asarray(coords, dtype=np.float64)
    c = n_clusters if n_clusters is not None else math.ceil(math.sqrt(len(coords)))
    if c < 1:
        raise ValueError("n_clusters must be >= 1")
    centers, u = fuzzy_cmeans(coords, c, seed=seed)
    labels = np.argmax(u, axis=1)
    _, heads = cKDTree(coords).query(centers)
    return labels, np.asarray(heads, dtype=np.int64)


def place_cl_sf(topology, plan, coords, n_clusters=None, seed=0):
    """Same-cluster pairs meet at their cluster head, everything else at the sink."""
    labels, heads = cluster_heads(coords, n_clusters, seed)
    hosts = {}
    for rid, r in plan.replicas.items():
        a, b = labels[r.left], labels[r.right]
        hosts[rid] = int(heads[a]) if a == b else plan.sink
    return _fixed(topology, plan, hosts, "cl_sf")


def place_cl_tree_sf(topology, plan, coords, n_clusters=None, seed=0, mode="true"):
    """Pairs meet at the LCA of their sources' cluster heads in an MST over heads and sink."""
    labels, heads = cluster_heads(coords, n_clusters, seed)
    members = sorted(set(heads.tolist()) | {plan.sink})
    pos = {v: i for i, v in enumerate(members)}
    graph = latency_graph(topology, coords, mode, nodes=members)
    parent, depth = rooted_tree(graph, pos[plan.sink])
    lca = LCA(parent, depth)
    rids = sorted(plan.replicas)
    hl = [pos[int(heads[labels[plan.replicas[r].left]])] for r in rids]
    hr = [pos[int(heads[labels[plan.replicas[r].right]])] for r in rids]
    meet = lca(hl, hr)
    return _fixed(topology, plan, {rid: members[m] for rid, m in zip(rids, meet.tolist())}, "cl_tree_sf")


def run_strategy(name, topology, coords, logical_plan, matrix, config=None, seed=0, mode="true",
                 n_clusters=None):
    """Uniform entry point: ``(placement, parallelized plan)`` for any strategy name."""
    from .physical import NovaConfig

    key = name.replace("-", "_").lower()
    if key not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")
    config = config or NovaConfig()
    if key == "nova":
        return nova_place(topology, coords, logical_plan, matrix, config)
    plan = replicate_pairwise(expand_sources(logical_plan, topology), matrix, selectivity=config.selectivity)
    if key == "sink":
        return place_sink(topology, plan), plan
    if key == "source_based":
        return place_source_based(topology, plan), plan
    if key == "top_c":
        return place_top_c(topology, plan), plan
    if key == "tree":
        return place_tree(topology, plan, coords, mode), plan
    if key == "cl_sf":
        return place_cl_sf(topology, plan, coords, n_clusters, seed), plan
    return place_cl_tree_sf(topology, plan, coords, n_clusters, seed, mode), plan
