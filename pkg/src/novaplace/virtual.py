"""Virtual join placement: each replica sits at the geometric median of its anchors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import weiszfeld_batch

TOL = 1e-6
MAX_ITER = 1000
EPS = 1e-9


def geometric_median(points, tol=TOL, max_iter=MAX_ITER, start=None, weights=None, history=None):
    """Weiszfeld iteration for ``argmin_y sum ||p - y||``.

    Distances are smoothed as ``sqrt(d^2 + eps^2)`` so an iterate that lands on
    an anchor stays well defined. Pass a list as ``history`` to collect the
    objective after every step. Returns ``(point, objective)``.
    """
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("geometric median needs at least one point")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite coordinates")
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=np.float64)
    y = (w[:, None] * p).sum(0) / w.sum() if start is None else np.asarray(start, dtype=np.float64).copy()
    objective = lambda z: float((w * np.sqrt(((p - z) ** 2).sum(-1))).sum())  # noqa: E731
    if history is not None:
        history.append(objective(y))
    for _ in range(max_iter):
        dist = np.sqrt(EPS * EPS + ((p - y) ** 2).sum(-1))
        coef = w / dist
        nxt = (coef[:, None] * p).sum(0) / coef.sum()
        step = float(np.sqrt(((nxt - y) ** 2).sum()))
        y = nxt
        if history is not None:
            history.append(objective(y))
        if step < tol:
            break
    return y, objective(y)


@dataclass
class VirtualPlacement:
    points: dict = field(default_factory=dict)       # rid -> point
    objective: dict = field(default_factory=dict)    # rid -> sum of anchor distances

    def __len__(self):
        return len(self.points)

    def to_dict(self, labels=None):
        label = labels or (lambda rid: f"j{rid + 1}")
        return {label(rid): {"point": np.asarray(pt).tolist(), "objective": self.objective[rid]}
                for rid, pt in sorted(self.points.items())}

    def save(self, path, labels=None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(labels), fh, indent=1)


def replica_anchors(coords, plan, rids):
    """Anchor array ``(R, 3, d)``: left source, right source, sink."""
    coords = np.asarray(coords)
    reps = [plan.replicas[r] for r in rids]
    left = np.fromiter((r.left for r in reps), dtype=np.int64, count=len(reps))
    right = np.fromiter((r.right for r in reps), dtype=np.int64, count=len(reps))
    n = len(coords)
    bad = [v for v in np.concatenate([left, right, [plan.sink]]) if not 0 <= v < n]
    if bad:
        raise KeyError(f"missing coordinates for pinned node(s) {sorted(set(int(b) for b in bad))[:5]}")
    sink = np.broadcast_to(coords[plan.sink], (len(reps), coords.shape[1]))
    return np.stack([coords[left], coords[right], sink], axis=1)


def compute_optima(coords, plan, rids=None, tol=TOL, max_iter=MAX_ITER) -> VirtualPlacement:
    """Geometric median per join replica over its two sources and the sink.

    Replicas are independent, so the batch is solved in one kernel call and
    each result depends only on that replica's anchors.
    """
    rids = sorted(plan.replicas) if rids is None else list(rids)
    out = VirtualPlacement()
    if not rids:
        return out
    anchors = replica_anchors(coords, plan, rids)
    pts, obj, _ = weiszfeld_batch(anchors, tol=tol, max_iter=max_iter, eps=EPS)
    for k, rid in enumerate(rids):
        out.points[rid] = pts[k]
        out.objective[rid] = float(obj[k])
    return out
