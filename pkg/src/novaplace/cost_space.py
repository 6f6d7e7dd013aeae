"""Euclidean cost space: latency embedding and nearest-neighbour search."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kernels import block_knn, probe_fit, vivaldi_relax


@dataclass(frozen=True)
class EmbedConfig:
    d: int = 2
    m: int = 20                 # Vivaldi neighbours per node
    iterations: int = 200
    alpha0: float = 1.0
    tau: float = 200.0
    seed: int = 0
    mds_iterations: int = 1000
    mds_tol: float = 1e-12      # relative stress decrease that stops MDS
    dense_limit: int = 5000

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError("need d >= 1 and m >= 1")


class DenseLimitError(ValueError):
    pass


def _as_matrix(latency):
    if hasattr(latency, "to_dense"):
        return latency.to_dense()
    return np.asarray(latency, dtype=np.float64)


def stress(coords, a):
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    return float(((dist - a) ** 2)[np.triu_indices(len(a), 1)].sum())


def embed_mds(latency, config=EmbedConfig(), return_stress=False):
    """Metric MDS by stress majorization (SMACOF).

    Each Guttman transform cannot increase the squared stress
    ``sum_{i<j} (||x_i - x_j|| - A_ij)^2``, so the history is monotone.
    """
    if hasattr(latency, "n") and latency.n > config.dense_limit:
        raise DenseLimitError(f"{latency.n} nodes exceeds the dense MDS limit {config.dense_limit}; use Vivaldi")
    a = _as_matrix(latency)
    n = a.shape[0]
    if n > config.dense_limit:
        raise DenseLimitError(f"{n} nodes exceeds the dense MDS limit {config.dense_limit}; use Vivaldi")
    if n <= 1:
        coords = np.zeros((n, config.d))
        return (coords, [0.0]) if return_stress else coords
    rng = np.random.default_rng(config.seed)
    scale = float(a.max()) or 1.0
    x = rng.uniform(0.0, scale, size=(n, config.d))
    history = [stress(x, a)]
    iu = np.triu_indices(n, 1)
    for _ in range(config.mds_iterations):
        diff = x[:, None, :] - x[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            b = np.where(dist > 0, -a / dist, 0.0)
        np.fill_diagonal(b, 0.0)
        np.fill_diagonal(b, -b.sum(axis=1))
        x = b @ x / n
        diff = x[:, None, :] - x[None, :, :]
        s = float(((np.sqrt((diff * diff).sum(-1)) - a) ** 2)[iu].sum())
        prev = history[-1]
        history.append(s)
        if prev - s <= config.mds_tol * max(prev, 1e-300):
            break
    return (x, history) if return_stress else x


def sample_neighbors(n, m, rng):
    """``m`` distinct uniformly sampled neighbours per node, never the node itself."""
    if m >= n:
        raise ValueError(f"neighbour count m={m} must be smaller than n={n}")
    rows = np.arange(n)[:, None]
    nbrs = rng.integers(n - 1, size=(n, m))
    nbrs += nbrs >= rows
    srt = np.sort(nbrs, axis=1)
    dup_rows = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
    for i in dup_rows:
        choice = rng.choice(n - 1, size=m, replace=False)
        nbrs[i] = choice + (choice >= i)
    return nbrs


def embed_vivaldi(topology_or_latency, config=EmbedConfig(), return_neighbors=False):
    """Fixed-neighbour Vivaldi: probes only ``n*m`` latency pairs."""
    latency = getattr(topology_or_latency, "latency", topology_or_latency)
    n = latency.n
    rng = np.random.default_rng(config.seed)
    if n == 1:
        coords = np.zeros((1, config.d))
        return (coords, np.zeros((1, 0), dtype=np.int64)) if return_neighbors else coords
    nbrs = sample_neighbors(n, config.m, rng)
    lat = latency.pairs(np.repeat(np.arange(n)[:, None], config.m, axis=1), nbrs)
    spread = float(np.median(lat)) or 1.0
    x0 = rng.uniform(-0.5 * spread, 0.5 * spread, size=(n, config.d))
    coords = vivaldi_relax(x0, nbrs, lat, config.iterations, config.alpha0, config.tau)
    return (coords, nbrs) if return_neighbors else coords


def embed(topology, config=EmbedConfig(), method="auto"):
    if method == "auto":
        method = "mds" if topology.n <= min(config.dense_limit, 1000) else "vivaldi"
    if method == "mds":
        return embed_mds(topology.latency, config)
    if method == "vivaldi":
        return embed_vivaldi(topology, config)
    raise ValueError(f"unknown embedding method {method!r}")


def embedding_error(coords, latency, sample_pairs=10_000, seed=0):
    """MAE and median relative error of embedded distances over sampled pairs.

    ``sample_pairs`` is either a count (pairs drawn uniformly, i != j) or an
    explicit ``(k, 2)`` array of node pairs.
    """
    coords = np.asarray(coords)
    if np.ndim(sample_pairs) == 0:
        if sample_pairs < 1:
            raise ValueError("need at least one sample pair")
        rng = np.random.default_rng(seed)
        n = len(coords)
        i = rng.integers(n, size=sample_pairs)
        j = rng.integers(n - 1, size=sample_pairs)
        j += j >= i
    else:
        pairs = np.asarray(sample_pairs, dtype=np.int64).reshape(-1, 2)
        i, j = pairs[:, 0], pairs[:, 1]
    est = np.sqrt(((coords[i] - coords[j]) ** 2).sum(-1))
    true = latency.pairs(i, j) if hasattr(latency, "pairs") else np.asarray(latency)[i, j]
    err = np.abs(est - true)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(true > 0, err / true, 0.0)
    return {"mae": float(err.mean()), "relative_error_median": float(np.median(rel))}


def fit_point(anchors, latencies, max_iter=500, tol=1e-10, start=None):
    """Least-squares position for a new node from its probes.

    Minimises ``sum_j (||x - p_j|| - L_j)^2`` with the single-point Guttman
    update, which never increases the objective. ``start`` seeds the
    iteration, e.g. with a moving node's previous position; otherwise it
    starts at the probe centroid.
    """
    p = np.asarray(anchors, dtype=np.float64)
    lat = np.asarray(latencies, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("need at least one probe")
    if start is not None:
        x = np.array(start, dtype=np.float64)
    else:
        x = p.mean(axis=0)
        x[0] += 1e-6 * (float(lat.max()) or 1.0)
    return probe_fit(p, lat, x, max_iter=max_iter, tol=tol)


def probe_residual(point, anchors, latencies):
    dist = np.sqrt(((np.asarray(anchors) - point) ** 2).sum(-1))
    return float(((dist - np.asarray(latencies)) ** 2).sum())


def add_node_coordinates(coords, new_node, neighbor_probes):
    """Append coordinates for ``new_node`` from ``[(node_id, latency_ms), ...]`` probes.

    Existing rows are copied unchanged.
    """
    if not neighbor_probes:
        raise ValueError("empty probe set")
    coords = np.asarray(coords, dtype=np.float64)
    if new_node != len(coords):
        raise ValueError(f"new node id must be {len(coords)}")
    ids = np.array([nid for nid, _ in neighbor_probes], dtype=np.int64)
    lat = np.array([ms for _, ms in neighbor_probes], dtype=np.float64)
    point = fit_point(coords[ids], lat)
    return np.vstack([coords, point[None, :]])


def save_coordinates(path, coords):
    coords = np.asarray(coords)
    Path(path).write_text(json.dumps({"d": int(coords.shape[1]), "coords": coords.tolist()}))


def load_coordinates(path):
    doc = json.loads(Path(path).read_text())
    coords = np.asarray(doc["coords"], dtype=np.float64).reshape(-1, int(doc["d"]))
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    return coords


# --- neighbour index -------------------------------------------------------------

def _split_blocks(coords, size):
    """Positions of ``coords`` cut into groups of at most ``size`` by median splits on the widest axis."""
    out, stack = [], [np.arange(len(coords))]
    while stack:
        pos = stack.pop()
        if len(pos) <= size:
            out.append(pos)
            continue
        pts = coords[pos]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        half = len(pos) // 2
        order = np.argpartition(pts[:, axis], half)
        stack.append(pos[order[half:]])
        stack.append(pos[order[:half]])
    return out


class NeighborIndex:
    """k-nearest-neighbour search over node coordinates with an eligibility filter.

    ``mode="exact"`` cuts the points into spatial blocks; a query visits blocks
    by the distance to their bounding boxes and stops once no unvisited block
    can hold a closer point. Removal only flags the entry, and a block is
    compacted when half of it is gone, so regions that empty out cost nothing
    to skip. Inserted points sit in a small buffer until it is folded in.
    ``mode="approximate"`` buckets points into a uniform grid and re-ranks an
    over-fetched candidate set exactly.
    Results are ordered by ascending distance, ties by ascending node id.
    """

    EXTRA_LIMIT = 1024
    BLOCK_SIZE = 512

    def __init__(self, coords, mode="exact", ids=None, overfetch=4, d=None):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.size == 0:
            if d is None:
                raise ValueError("index needs at least one coordinate or an explicit dimension")
            coords = coords.reshape(0, d)
        if mode not in ("exact", "approximate"):
            raise ValueError(f"unknown index mode {mode!r}")
        self.mode = mode
        self.d = coords.shape[1]
        self.overfetch = overfetch
        ids = np.arange(len(coords)) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(ids) != len(coords):
            raise ValueError("ids and coords differ in length")
        self._member = np.zeros(0, dtype=bool)
        self._build(coords, ids)

    # construction
    def _build(self, coords, ids):
        size = max(len(self._member), int(ids.max()) + 1 if len(ids) else 0)
        self._member = np.zeros(size, dtype=bool)
        self._member[ids] = True
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate ids")
        self._count = len(ids)
        self._extra = {}
        self._extra_cache = None
        if self.mode == "exact":
            parts = _split_blocks(coords, self.BLOCK_SIZE) if len(ids) else []
            perm = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
            sizes = np.array([len(q) for q in parts], dtype=np.int64)
            self._ids = ids[perm]
            self._pts = np.ascontiguousarray(coords[perm])
            self._alive = np.ones(len(perm), dtype=bool)
            self._end = np.cumsum(sizes)
            self._start = self._end - sizes
            self._nalive = sizes.copy()
            self._blk_of = np.full(size, -1, dtype=np.int64)
            self._blk_of[self._ids] = np.repeat(np.arange(len(parts)), sizes)
            self._pos_of = np.zeros(size, dtype=np.int64)
            self._pos_of[self._ids] = np.arange(len(perm))
            self._lo = np.array([coords[q].min(axis=0) for q in parts]).reshape(-1, self.d)
            self._hi = np.array([coords[q].max(axis=0) for q in parts]).reshape(-1, self.d)
            return
        if len(ids):
            lo = coords.min(axis=0)
            span = np.maximum(coords.max(axis=0) - lo, 1e-9)
        else:
            lo, span = np.zeros(self.d), np.ones(self.d)
        cells_per_axis = max(1, int((max(len(ids), 1) / 8.0) ** (1.0 / self.d)))
        self._cell = float(span.max() / cells_per_axis) or 1.0
        self._origin = lo
        self._grid = {}
        self._coord_of = {}
        self._kmin = np.zeros(self.d, dtype=np.int64)
        self._kmax = np.zeros(self.d, dtype=np.int64)
        for nid, c in zip(ids.tolist(), coords):
            self._grid_insert(nid, c)

    def _key(self, c):
        return tuple(np.floor((np.asarray(c) - self._origin) / self._cell).astype(np.int64).tolist())

    def _grid_insert(self, nid, c):
        key = self._key(c)
        if not self._coord_of:
            self._kmin = self._kmax = np.array(key)
        self._coord_of[nid] = np.asarray(c, dtype=np.float64)
        self._grid.setdefault(key, []).append(nid)
        self._kmin = np.minimum(self._kmin, key)
        self._kmax = np.maximum(self._kmax, key)

    def __len__(self):
        return self._count

    def __contains__(self, nid):
        nid = int(nid)
        return 0 <= nid < len(self._member) and bool(self._member[nid])

    def ids(self):
        return np.flatnonzero(self._member)

    def coord(self, nid):
        nid = int(nid)
        if nid not in self:
            raise KeyError(f"node {nid} not indexed")
        if nid in self._extra:
            return self._extra[nid]
        if self.mode == "approximate":
            return self._coord_of[nid]
        return self._pts[self._pos_of[nid]]

    # mutation
    def add(self, nid, coord):
        nid = int(nid)
        coord = np.asarray(coord, dtype=np.float64)
        if nid in self:
            raise ValueError(f"node {nid} already indexed")
        if nid >= len(self._member):
            size = max(nid + 1, 2 * len(self._member))
            self._member = np.concatenate([self._member, np.zeros(size - len(self._member), dtype=bool)])
            if self.mode == "exact":
                grow = size - len(self._blk_of)
                self._blk_of = np.concatenate([self._blk_of, np.full(grow, -1, dtype=np.int64)])
                self._pos_of = np.concatenate([self._pos_of, np.zeros(grow, dtype=np.int64)])
        self._member[nid] = True
        self._count += 1
        if self.mode == "approximate":
            self._grid_insert(nid, coord)
            return
        self._extra[nid] = coord
        self._extra_cache = None
        if len(self._extra) > self.EXTRA_LIMIT:
            self._rebuild()

    def remove(self, nid):
        nid = int(nid)
        if nid not in self:
            raise KeyError(f"node {nid} not indexed")
        self._member[nid] = False
        self._count -= 1
        if self.mode == "approximate":
            self._grid[self._key(self._coord_of[nid])].remove(nid)
            del self._coord_of[nid]
            return
        if self._extra.pop(nid, None) is not None:
            self._extra_cache = None
            return
        b, p = int(self._blk_of[nid]), int(self._pos_of[nid])
        self._alive[p] = False
        self._nalive[b] -= 1
        self._blk_of[nid] = -1
        if 0 < self._nalive[b] <= (self._end[b] - self._start[b]) // 2:
            self._compact(b)

    def _compact(self, b):
        """Move the live entries of block ``b`` to the front of its slice and shrink its box."""
        lo, hi = self._start[b], self._end[b]
        keep = np.flatnonzero(self._alive[lo:hi]) + lo
        m = len(keep)
        self._ids[lo:lo + m] = self._ids[keep]
        self._pts[lo:lo + m] = self._pts[keep]
        self._alive[lo:lo + m] = True
        self._alive[lo + m:hi] = False
        self._end[b] = lo + m
        self._pos_of[self._ids[lo:lo + m]] = np.arange(lo, lo + m)
        self._lo[b] = self._pts[lo:lo + m].min(axis=0)
        self._hi[b] = self._pts[lo:lo + m].max(axis=0)

    def _rebuild(self):
        if self.mode == "approximate":
            ids = self.ids()
            coords = np.array([self._coord_of[i] for i in ids.tolist()]).reshape(len(ids), self.d)
        else:
            ex = np.fromiter(self._extra.keys(), dtype=np.int64, count=len(self._extra))
            ex_pts = np.array([self._extra[i] for i in ex.tolist()]).reshape(len(ex), self.d)
            ids = np.concatenate([self._ids[self._alive], ex])
            coords = np.concatenate([self._pts[self._alive], ex_pts])
        self._build(coords, ids)

    # queries
    def knn(self, point, k, eligible=None, limit=None):
        """Return ``(ids, distances)`` of the ``k`` nearest eligible nodes.

        ``eligible`` is a boolean array indexed by node id, a callable on an
        id array, or None for no filtering. With ``limit`` the exact search
        stops after examining about that many entries, so fewer than ``k``
        may come back.
        """
        if k <= 0:
            raise ValueError("k must be positive")
        point = np.asarray(point, dtype=np.float64)
        if self._count == 0:
            return np.empty(0, dtype=np.int64), np.empty(0)
        if self.mode == "exact":
            return self._knn_exact(point, k, eligible, limit)
        return self._knn_grid(point, k, eligible)

    @staticmethod
    def _filter(ids, eligible):
        if eligible is None or len(ids) == 0:
            return np.ones(len(ids), dtype=bool)
        if isinstance(eligible, tuple):
            values, threshold = eligible
            return np.asarray(values)[ids] >= threshold
        if callable(eligible):
            return np.asarray(eligible(ids), dtype=bool)
        ok = np.zeros(len(ids), dtype=bool)
        inside = ids < len(eligible)
        ok[inside] = eligible[ids[inside]]
        return ok

    def _finish(self, ids, dist, k):
        order = np.lexsort((ids, dist))[:k]
        return ids[order], dist[order]

    def _extra_candidates(self, point, eligible):
        if not self._extra:
            return np.empty(0, dtype=np.int64), np.empty(0)
        if self._extra_cache is None:
            ids = np.fromiter(self._extra.keys(), dtype=np.int64, count=len(self._extra))
            self._extra_cache = (ids, np.array([self._extra[i] for i in ids.tolist()]))
        ids, pts = self._extra_cache
        dist = np.sqrt(((pts - point) ** 2).sum(-1))
        keep = self._filter(ids, eligible)
        return ids[keep], dist[keep]

    def _knn_exact(self, point, k, eligible, limit=None):
        ex_ids, ex_dist = self._extra_candidates(point, eligible)
        blocks = (self._lo, self._hi, self._start, self._end, self._nalive, self._ids, self._pts, self._alive)
        if eligible is None or isinstance(eligible, tuple):
            ids, dist = block_knn(point, k, blocks, threshold=eligible, limit=limit)
        else:
            # arbitrary filters: mask a throwaway copy of the live flags
            alive = self._alive.copy()
            live = np.flatnonzero(alive)
            alive[live] = self._filter(self._ids[live], eligible)
            nalive = np.add.reduceat(alive, self._start) if len(self._start) else self._nalive
            nalive = np.where(self._end > self._start, nalive, 0)
            blocks = blocks[:4] + (nalive, self._ids, self._pts, alive)
            ids, dist = block_knn(point, k, blocks, limit=limit)
        if len(ex_ids):
            return self._finish(np.concatenate([ids, ex_ids]), np.concatenate([dist, ex_dist]), k)
        return ids, dist

    def _knn_grid(self, point, k, eligible):
        center = np.array(self._key(point))
        want = k * self.overfetch
        found_ids, found_dist = [], []
        n_found = 0
        max_ring = self._max_ring(center)
        ring = 0
        extra_ring = None
        while ring <= max_ring:
            for off in _ring_offsets(ring, self.d):
                members = self._grid.get(tuple((center + off).tolist()))
                if not members:
                    continue
                ids = np.array(members, dtype=np.int64)
                ids = ids[self._filter(ids, eligible)]
                if len(ids):
                    pts = np.array([self._coord_of[i] for i in ids.tolist()])
                    found_ids.append(ids)
                    found_dist.append(np.sqrt(((pts - point) ** 2).sum(-1)))
                    n_found += len(ids)
            if extra_ring is None and n_found >= want:
                extra_ring = ring + 1   # one more ring bounds the re-rank error
            if extra_ring is not None and ring >= extra_ring:
                break
            ring += 1
        if not found_ids:
            return np.empty(0, dtype=np.int64), np.empty(0)
        return self._finish(np.concatenate(found_ids), np.concatenate(found_dist), k)

    def _max_ring(self, center):
        return int(max(np.abs(center - self._kmin).max(), np.abs(self._kmax - center).max()))


def _ring_offsets(r, d):
    if r == 0:
        yield np.zeros(d, dtype=np.int64)
        return
    for off in itertools.product(range(-r, r + 1), repeat=d):
        if max(abs(o) for o in off) == r:
            yield np.array(off, dtype=np.int64)


def build_index(coords, mode="exact"):
    return NeighborIndex(coords, mode=mode)


def median_latency(latency, seed=0, samples=2000):
    rng = np.random.default_rng(seed)
    n = latency.n
    i = rng.integers(n, size=samples)
    j = rng.integers(n - 1, size=samples)
    j += j >= i
    return float(np.median(latency.pairs(i, j)))


__all__ = [
    "EmbedConfig", "DenseLimitError", "embed_mds", "embed_vivaldi", "embed", "embedding_error",
    "fit_point", "add_node_coordinates", "NeighborIndex", "build_index", "save_coordinates",
    "load_coordinates", "stress", "sample_neighbors", "probe_residual", "median_latency",
]
