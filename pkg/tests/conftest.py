import math

import numpy as np
import pytest

from novaplace.cli import EXAMPLE_CONFIG, running_example
from novaplace.cost_space import EmbedConfig, embed
from novaplace.physical import NovaConfig, nova_solve
from novaplace.plan import JoinMatrix, LogicalPlan
from novaplace.topology import SyntheticSpec, assign_workload, feasible_workload, generate_synthetic


@pytest.fixture(scope="session")
def example():
    """Bundled running example: topology, logical plan, join matrix and MDS coordinates."""
    topo, lp, matrix = running_example()
    coords = embed(topo, EmbedConfig(seed=0), method="mds")
    return topo, lp, matrix, coords


@pytest.fixture(scope="session")
def example_config():
    return NovaConfig(**EXAMPLE_CONFIG)


@pytest.fixture()
def example_result(example, example_config):
    topo, lp, matrix, coords = example
    return nova_solve(topo, coords, lp, matrix, example_config)


def synthetic_case(n=300, seed=0, **workload):
    """Feasible synthetic workload with exact-Euclidean coordinates."""
    base = generate_synthetic(SyntheticSpec(n_nodes=n, seed=seed))
    topo = assign_workload(base, feasible_workload(seed, **workload))
    lp = LogicalPlan.two_way_join(topo.sink, *topo.tag_names)
    matrix = JoinMatrix.one_per_row(topo, seed=seed)
    return topo, lp, matrix, np.array(base.ground_truth)


@pytest.fixture()
def synthetic():
    return synthetic_case()


def grid_oracle(p, lo=None, hi=None, res=0.1, refine=3):
    """Grid search for the geometric median, refined locally around the best cell."""
    lo = p.min(0) if lo is None else lo
    hi = p.max(0) if hi is None else hi
    center, best = None, None
    for _ in range(refine + 1):
        xs = np.arange(lo[0], hi[0] + res, res)
        ys = np.arange(lo[1], hi[1] + res, res)
        gx, gy = np.meshgrid(xs, ys)
        g = np.stack([gx.ravel(), gy.ravel()], 1)
        f = np.sqrt(((g[:, None, :] - p[None]) ** 2).sum(-1)).sum(1)
        center = g[np.argmin(f)]
        best = f.min()
        lo, hi = center - 2 * res, center + 2 * res
        res /= 10
    return center, best


def check_constraints(topo, pl, plan, config):
    """Capacity, eligibility, conservation and exclusivity on a finished placement."""
    assert set(pl.groups) == set(plan.replicas)
    for rid, groups in pl.groups.items():
        rep = plan.replicas[rid]
        lp, rp = plan.partitions[rid]
        assert math.isclose(sum(lp), rep.left_rate) and math.isclose(sum(rp), rep.right_rate)
        cells = [c for g in groups for c in g.cells]
        assert sorted(cells) == [(i, j) for i in range(len(lp)) for j in range(len(rp))]
        assert len({g.node for g in groups}) == len(groups)
        for g in groups:
            assert math.isclose(g.c_r, sum(lp[i] + rp[j] for i, j in g.cells))
    # nodes touched by a fallback replica may be overloaded; that is reported, not checked
    spread = {g.node for rid in pl.fallback for g in pl.groups[rid]}
    clean = [v for v in pl.hosts() if v not in spread]
    assert np.all(pl.load[clean] <= pl.capacity[clean] + 1e-9)
    assert np.all(topo.capacity[clean] >= config.c_min)
    assert set(pl.overloaded()) <= spread


# --- acceptance report ----------------------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    rep = outcome.get_result()
    n, title = mark.args
    if rep.failed or (rep.when == "call" and rep.passed and n not in _CRITERIA):
        _CRITERIA[n] = (title, "FAIL" if rep.failed else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {title}: {status}")
