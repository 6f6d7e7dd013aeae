"""Hot numeric loops: Vivaldi spring relaxation, batched Weiszfeld iteration,
single-point probe fitting and blocked nearest-neighbour search.

Each kernel has a numba implementation and a vectorised numpy implementation
with identical update rules, so both backends agree to floating-point noise.
The dispatchers at the bottom pick one according to ``_accel.USE_NUMBA``.
"""
import numpy as np

from . import _accel
from ._accel import njit


# --- Vivaldi -----------------------------------------------------------------

@njit
def _vivaldi_numba(coords, nbrs, lat, iterations, alpha0, tau):
    n, d = coords.shape
    m = nbrs.shape[1]
    x = coords.copy()
    disp = np.zeros((n, d))
    for t in range(iterations):
        step = alpha0 / (1.0 + t / tau)
        disp[:, :] = 0.0
        for i in range(n):
            for k in range(m):
                j = nbrs[i, k]
                dist2 = 0.0
                for c in range(d):
                    diff = x[i, c] - x[j, c]
                    dist2 += diff * diff
                dist = np.sqrt(dist2)
                err = lat[i, k] - dist
                if dist > 1e-12:
                    f = err / dist
                    for c in range(d):
                        disp[i, c] += f * (x[i, c] - x[j, c])
                else:
                    # coincident points: push apart along the first axis
                    disp[i, 0] += err if i < j else -err
        for i in range(n):
            for c in range(d):
                x[i, c] += step * disp[i, c] / m
    return x


def _vivaldi_numpy(coords, nbrs, lat, iterations, alpha0, tau, chunk=200_000):
    x = coords.copy()
    n, d = x.shape
    m = nbrs.shape[1]
    rows = np.arange(n)[:, None]
    for t in range(iterations):
        step = alpha0 / (1.0 + t / tau)
        disp = np.empty_like(x)
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            diff = x[lo:hi, None, :] - x[nbrs[lo:hi]]
            dist = np.sqrt(np.einsum("ikc,ikc->ik", diff, diff))
            err = lat[lo:hi] - dist
            safe = dist > 1e-12
            unit = np.where(safe[..., None], diff / np.where(safe, dist, 1.0)[..., None], 0.0)
            contrib = err[..., None] * unit
            sign = np.where(rows[lo:hi] < nbrs[lo:hi], 1.0, -1.0)
            contrib[..., 0] += np.where(safe, 0.0, err * sign)
            disp[lo:hi] = contrib.sum(axis=1)
        x += step * disp / m
    return x


# --- Weiszfeld ---------------------------------------------------------------

@njit
def _weiszfeld_numba(anchors, weights, tol, max_iter, eps):
    r_count, p_count, d = anchors.shape
    out = np.empty((r_count, d))
    obj = np.empty(r_count)
    iters = np.empty(r_count, dtype=np.int64)
    y = np.empty(d)
    num = np.empty(d)
    for r in range(r_count):
        wsum = 0.0
        for c in range(d):
            y[c] = 0.0
        for p in range(p_count):
            wsum += weights[r, p]
            for c in range(d):
                y[c] += weights[r, p] * anchors[r, p, c]
        for c in range(d):
            y[c] /= wsum
        it = 0
        while it < max_iter:
            it += 1
            den = 0.0
            for c in range(d):
                num[c] = 0.0
            for p in range(p_count):
                dist2 = eps * eps
                for c in range(d):
                    diff = anchors[r, p, c] - y[c]
                    dist2 += diff * diff
                w = weights[r, p] / np.sqrt(dist2)
                den += w
                for c in range(d):
                    num[c] += w * anchors[r, p, c]
            step2 = 0.0
            for c in range(d):
                nxt = num[c] / den
                step2 += (nxt - y[c]) ** 2
                y[c] = nxt
            if np.sqrt(step2) < tol:
                break
        total = 0.0
        for p in range(p_count):
            dist2 = 0.0
            for c in range(d):
                diff = anchors[r, p, c] - y[c]
                dist2 += diff * diff
            total += weights[r, p] * np.sqrt(dist2)
        out[r] = y
        obj[r] = total
        iters[r] = it
    return out, obj, iters


def _weiszfeld_numpy(anchors, weights, tol, max_iter, eps):
    r_count = anchors.shape[0]
    y = np.einsum("rp,rpc->rc", weights, anchors) / weights.sum(axis=1)[:, None]
    iters = np.zeros(r_count, dtype=np.int64)
    active = np.arange(r_count)
    it = 0
    while active.size and it < max_iter:
        it += 1
        a = anchors[active]
        diff = a - y[active, None, :]
        dist = np.sqrt(eps * eps + np.einsum("rpc,rpc->rp", diff, diff))
        w = weights[active] / dist
        nxt = np.einsum("rp,rpc->rc", w, a) / w.sum(axis=1)[:, None]
        step = np.sqrt(((nxt - y[active]) ** 2).sum(axis=1))
        y[active] = nxt
        iters[active] = it
        active = active[step >= tol]
    diff = anchors - y[:, None, :]
    obj = (weights * np.sqrt(np.einsum("rpc,rpc->rp", diff, diff))).sum(axis=1)
    return y, obj, iters


# --- single-point probe fit ----------------------------------------------------

@njit
def _probe_fit_numba(p, lat, x0, max_iter, tol):
    m, d = p.shape
    x = x0.copy()
    nxt = np.empty(d)
    for _ in range(max_iter):
        for c in range(d):
            nxt[c] = 0.0
        for j in range(m):
            dist2 = 0.0
            for c in range(d):
                diff = x[c] - p[j, c]
                dist2 += diff * diff
            dist = max(np.sqrt(dist2), 1e-12)
            for c in range(d):
                nxt[c] += p[j, c] + lat[j] * (x[c] - p[j, c]) / dist
        step2 = 0.0
        for c in range(d):
            nxt[c] /= m
            step2 += (nxt[c] - x[c]) ** 2
            x[c] = nxt[c]
        if np.sqrt(step2) < tol:
            break
    return x


def _probe_fit_numpy(p, lat, x0, max_iter, tol):
    x = x0.copy()
    for _ in range(max_iter):
        diff = x - p
        dist = np.maximum(np.sqrt((diff * diff).sum(-1)), 1e-12)
        nxt = (p + lat[:, None] * diff / dist[:, None]).mean(axis=0)
        step = float(np.sqrt(((nxt - x) ** 2).sum()))
        x = nxt
        if step < tol:
            break
    return x


# --- blocked k-nearest-neighbour search ----------------------------------------

@njit
def _block_knn_numba(point, k, lo, hi, start, end, nalive, ids, pts, alive, score, min_score, use_score, limit):
    nb, d = lo.shape
    box = np.empty(nb)
    for b in range(nb):
        g2 = 0.0
        for c in range(d):
            g = max(lo[b, c] - point[c], point[c] - hi[b, c], 0.0)
            g2 += g * g
        box[b] = np.sqrt(g2)
    order = np.argsort(box, kind="mergesort")
    out_id = np.empty(k, dtype=np.int64)
    out_d = np.empty(k)
    cnt = 0
    examined = 0
    for o in range(nb):
        b = order[o]
        if cnt == k and box[b] > out_d[k - 1]:
            break
        if limit >= 0 and examined >= limit:
            break
        if nalive[b] == 0:
            continue
        examined += nalive[b]
        for p in range(start[b], end[b]):
            if not alive[p]:
                continue
            v = ids[p]
            if use_score and not score[v] >= min_score:
                continue
            dist2 = 0.0
            for c in range(d):
                diff = pts[p, c] - point[c]
                dist2 += diff * diff
            dd = np.sqrt(dist2)
            if cnt == k and (dd > out_d[k - 1] or (dd == out_d[k - 1] and v > out_id[k - 1])):
                continue
            if cnt < k:
                i = cnt
                cnt += 1
            else:
                i = k - 1
            while i > 0 and (out_d[i - 1] > dd or (out_d[i - 1] == dd and out_id[i - 1] > v)):
                out_d[i] = out_d[i - 1]
                out_id[i] = out_id[i - 1]
                i -= 1
            out_d[i] = dd
            out_id[i] = v
    return out_id[:cnt], out_d[:cnt]


def _block_knn_numpy(point, k, lo, hi, start, end, nalive, ids, pts, alive, score, min_score, use_score, limit):
    gap = np.maximum(np.maximum(lo - point, point - hi), 0.0)
    box = np.sqrt((gap * gap).sum(-1))
    best_ids, best_d = np.empty(0, dtype=np.int64), np.empty(0)
    kth = np.inf
    examined = 0
    for b in np.argsort(box, kind="stable").tolist():
        if box[b] > kth or (limit >= 0 and examined >= limit):
            break
        if nalive[b] == 0:
            continue
        examined += nalive[b]
        sl = slice(start[b], end[b])
        diff = pts[sl] - point
        dist = np.sqrt((diff * diff).sum(-1))
        keep = alive[sl] & (dist <= kth)
        if use_score:
            keep &= score[ids[sl]] >= min_score
        if not keep.any():
            continue
        best_ids = np.concatenate([best_ids, ids[sl][keep]])
        best_d = np.concatenate([best_d, dist[keep]])
        order = np.lexsort((best_ids, best_d))[:k]
        best_ids, best_d = best_ids[order], best_d[order]
        if len(best_ids) == k:
            kth = best_d[-1]
    return best_ids, best_d


# --- dispatch ----------------------------------------------------------------

def vivaldi_relax(coords, nbrs, lat, iterations, alpha0, tau, use_numba=None):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    nbrs = np.ascontiguousarray(nbrs, dtype=np.int64)
    lat = np.ascontiguousarray(lat, dtype=np.float64)
    if _accel.USE_NUMBA if use_numba is None else use_numba:
        return _vivaldi_numba(coords, nbrs, lat, int(iterations), float(alpha0), float(tau))
    return _vivaldi_numpy(coords, nbrs, lat, int(iterations), float(alpha0), float(tau))


def weiszfeld_batch(anchors, weights=None, tol=1e-6, max_iter=1000, eps=1e-9, use_numba=None):
    """Geometric medians of ``R`` independent anchor sets of shape ``(R, P, d)``.

    Returns ``(points, objectives, iterations)``.
    """
    anchors = np.ascontiguousarray(anchors, dtype=np.float64)
    if weights is None:
        weights = np.ones(anchors.shape[:2])
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if anchors.shape[0] == 0:
        return np.empty((0, anchors.shape[2])), np.empty(0), np.empty(0, dtype=np.int64)
    if _accel.USE_NUMBA if use_numba is None else use_numba:
        return _weiszfeld_numba(anchors, weights, float(tol), int(max_iter), float(eps))
    return _weiszfeld_numpy(anchors, weights, float(tol), int(max_iter), float(eps))


_NO_SCORE = np.empty(0)


def block_knn(point, k, blocks, threshold=None, limit=None, use_numba=None):
    """k nearest live entries of a blocked point set, ties by ascending id.

    ``blocks`` is ``(lo, hi, start, end, nalive, ids, pts, alive)``; entries of
    block ``b`` live in ``start[b]:end[b]``. ``threshold=(values, t)`` keeps only
    ids with ``values[id] >= t``. ``limit`` stops after about that many entries.
    """
    point = np.ascontiguousarray(point, dtype=np.float64)
    score, min_score, use_score = _NO_SCORE, 0.0, False
    if threshold is not None:
        score, min_score, use_score = np.asarray(threshold[0], dtype=np.float64), float(threshold[1]), True
    lim = -1 if limit is None else int(limit)
    fn = _block_knn_numba if (_accel.USE_NUMBA if use_numba is None else use_numba) else _block_knn_numpy
    return fn(point, int(k), *blocks, score, min_score, use_score, lim)


def probe_fit(anchors, latencies, start, max_iter=500, tol=1e-10, use_numba=None):
    """Guttman iterations for one point against fixed anchors, from ``start``."""
    p = np.ascontiguousarray(anchors, dtype=np.float64)
    lat = np.ascontiguousarray(latencies, dtype=np.float64)
    x0 = np.ascontiguousarray(start, dtype=np.float64)
    fn = _probe_fit_numba if (_accel.USE_NUMBA if use_numba is None else use_numba) else _probe_fit_numpy
    return fn(p, lat, x0, int(max_iter), float(tol))
