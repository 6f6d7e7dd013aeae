"""Numba vs numpy timings for the hot kernels.

Run ``python benchmarks/bench_kernels.py``. Each kernel is warmed up once
(compilation excluded), then timed as the best of ``--repeats`` runs.
The same inputs go to both backends and the outputs are compared.
"""
import argparse
import time

import numpy as np

from novaplace import kernels
from novaplace.cost_space import NeighborIndex, sample_neighbors


def best_of(fn, repeats):
    fn()
    out = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out = min(out, time.perf_counter() - t0)
    return out


def cases(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 100, size=(n, 2))
    nbrs = sample_neighbors(n, 20, rng)
    lat = np.sqrt(((pts[:, None, :] - pts[nbrs]) ** 2).sum(-1))
    x0 = rng.uniform(-50, 50, size=(n, 2))
    anchors = rng.uniform(0, 100, size=(n, 3, 2))
    index = NeighborIndex(pts)
    blocks = (index._lo, index._hi, index._start, index._end, index._nalive, index._ids, index._pts, index._alive)
    queries = rng.uniform(0, 100, size=(200, 2))
    residual = rng.uniform(0, 100, size=n)
    probe_anchors = pts[:20]
    probe_lat = np.sqrt(((probe_anchors - pts[20]) ** 2).sum(-1))

    def knn(use):
        return [kernels.block_knn(q, 8, blocks, threshold=(residual, 50.0), use_numba=use) for q in queries]

    return {
        "vivaldi (20 iters)": lambda use: kernels.vivaldi_relax(x0, nbrs, lat, 20, 1.0, 200.0, use_numba=use),
        "weiszfeld batch": lambda use: kernels.weiszfeld_batch(anchors, use_numba=use)[0],
        "block knn x200": knn,
        "probe fit": lambda use: kernels.probe_fit(probe_anchors, probe_lat, probe_anchors.mean(0) + 1e-3,
                                                   use_numba=use),
    }


def same(a, b):
    if isinstance(a, list):
        return all(np.array_equal(x[0], y[0]) and np.allclose(x[1], y[1]) for x, y in zip(a, b))
    return np.allclose(a, b, atol=1e-6)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(f"{'kernel':22s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s}  agree")
    for name, fn in cases(args.n, args.seed).items():
        t_np = best_of(lambda: fn(False), args.repeats)
        t_nb = best_of(lambda: fn(True), args.repeats)
        print(f"{name:22s} {t_np:10.4f} {t_nb:10.4f} {t_np / t_nb:8.1f}x  {same(fn(False), fn(True))}")


if __name__ == "__main__":
    main()
