import json
import math

import numpy as np
import pytest
from scipy.spatial import Delaunay

from novaplace.kernels import weiszfeld_batch
from novaplace.plan import ParallelizedPlan, expand_sources, replicate_pairwise
from novaplace.virtual import compute_optima, geometric_median

from conftest import grid_oracle



def test_identical_points():
    y, obj = geometric_median(np.full((4, 2), 3.0))
    assert np.allclose(y, 3.0) and obj < 1e-6


def test_equilateral_triangle():
    p = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, math.sqrt(3)]])
    y, obj = geometric_median(p)
    assert np.allclose(y, p.mean(0), atol=1e-4)
    assert abs(obj - 3 * 2 / math.sqrt(3)) < 1e-4


def test_square():
    y, obj = geometric_median(np.array([[0.0, 0], [0, 2], [2, 0], [2, 2]]))
    assert np.allclose(y, [1, 1], atol=1e-4) and abs(obj - 4 * math.sqrt(2)) < 1e-4


def test_obtuse_vertex_is_the_median():
    p = np.array([[0.0, 0.0], [10.0, 0.5], [-10.0, 0.5]])      # angle at the origin ~ 174 degrees
    y, obj = geometric_median(p)
    assert np.linalg.norm(y) < 1e-3
    _, oracle = grid_oracle(p, lo=np.array([-1.0, -1.0]), hi=np.array([1.0, 1.0]), res=0.01)
    assert obj <= oracle + 1e-6


def test_collinear_anchors_give_the_middle_point():
    p = np.array([[0.0, 0.0], [3.0, 3.0], [10.0, 10.0]])
    y, _ = geometric_median(p)
    assert np.allclose(y, [3, 3], atol=1e-3)


def test_empty_and_non_finite():
    with pytest.raises(ValueError):
        geometric_median(np.empty((0, 2)))
    with pytest.raises(ValueError):
        geometric_median(np.array([[0.0, np.nan]]))


@pytest.mark.parametrize("seed", range(10))
def test_objective_is_monotone(seed):
    p = np.random.default_rng(seed).uniform(0, 100, (3, 2))
    hist = []
    geometric_median(p, history=hist)
    assert np.all(np.diff(hist) <= 1e-9)


def test_random_instances_match_oracle_and_stay_in_hull():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = rng.uniform(0, 100, (3, 2))
        y, obj = geometric_median(p)
        _, oracle = grid_oracle(p, res=0.5)
        assert obj <= oracle + 1e-2
        assert Delaunay(p).find_simplex(y, tol=1e-6) >= 0 or _on_edge(p, y)


def _on_edge(p, y, tol=1e-5):
    for a, b in ((0, 1), (1, 2), (0, 2)):
        ab, ay = p[b] - p[a], y - p[a]
        t = np.clip(ay @ ab / (ab @ ab), 0, 1)
        if np.linalg.norm(p[a] + t * ab - y) < tol:
            return True
    return False


def test_different_starts_converge_together():
    p = np.random.default_rng(3).uniform(0, 100, (3, 2))
    a, _ = geometric_median(p, start=np.array([0.0, 0.0]))
    b, _ = geometric_median(p, start=np.array([100.0, 100.0]))
    assert np.linalg.norm(a - b) <= 10 * 1e-6 * 100


def test_duplicate_anchor_counts_twice():
    p = np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [5.0, 8.0]])
    y1, _ = geometric_median(p)
    y2, _ = geometric_median(p[1:], weights=np.array([2.0, 1.0, 1.0]))
    assert np.allclose(y1, y2, atol=1e-6)


def test_batched_kernel_matches_single():
    anchors = np.random.default_rng(1).uniform(0, 100, (40, 3, 2))
    pts, obj, _ = weiszfeld_batch(anchors)
    for k in range(40):
        y, o = geometric_median(anchors[k])
        assert np.allclose(pts[k], y, atol=1e-6) and abs(obj[k] - o) < 1e-6


def test_running_example_optimum_inside_triangle(example, example_result):
    topo, _, _, coords = example
    plan = example_result.plan
    rep = plan.replicas[0]
    tri = coords[[rep.left, rep.right, plan.sink]]
    y = example_result.virtual.points[0]
    assert Delaunay(tri).find_simplex(y) >= 0
    assert not any(np.allclose(y, v, atol=1e-3) for v in tri)


def test_compute_optima_is_order_independent(synthetic):
    topo, lp, m, coords = synthetic
    plan = replicate_pairwise(expand_sources(lp, topo), m)
    rids = sorted(plan.replicas)
    a = compute_optima(coords, plan, rids)
    b = compute_optima(coords, plan, rids[::-1])
    c = compute_optima(coords, plan, rids[5:9])
    for rid in rids:
        assert np.array_equal(a.points[rid], b.points[rid])
    for rid in rids[5:9]:
        assert np.array_equal(a.points[rid], c.points[rid])


def test_compute_optima_objective_matches_distances(synthetic):
    topo, lp, m, coords = synthetic
    plan = replicate_pairwise(expand_sources(lp, topo), m)
    vp = compute_optima(coords, plan)
    for rid, y in list(vp.points.items())[:20]:
        r = plan.replicas[rid]
        anchors = coords[[r.left, r.right, plan.sink]]
        assert abs(np.sqrt(((anchors - y) ** 2).sum(-1)).sum() - vp.objective[rid]) < 1e-6


def test_compute_optima_empty_plan():
    assert len(compute_optima(np.zeros((2, 2)), ParallelizedPlan(sink=0))) == 0


def test_compute_optima_missing_coordinate():
    plan = ParallelizedPlan(sink=0)
    plan.add_replica(1, 5, 1.0, 1.0)
    with pytest.raises(KeyError):
        compute_optima(np.zeros((3, 2)), plan)


def test_virtual_export(example_result, tmp_path):
    vp = example_result.virtual
    vp.save(tmp_path / "v.json")
    doc = json.loads((tmp_path / "v.json").read_text())
    assert set(doc) == {"j1", "j2", "j3", "j4"} and len(doc["j1"]["point"]) == 2
