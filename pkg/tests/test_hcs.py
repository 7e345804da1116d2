import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llptree.fixtures import euclidean, l5, unit_square
from llptree.hcs import (HcsParams, LlpTree, bounded, build_tree, check_tree, depth_bound,
                         hcs, make_permutation, overlay_matrix, random_clustering,
                         tree_path_latency)
from llptree.topo import PopSite, metric_closure

IDENTITY5 = (0, 1, 2, 3, 4)


def naive_hcs(lat, members, d, lt, pi, alpha=2.0):
    """Straight transcription of the recursive procedure, loops only."""
    def total(i, ms):
        return sum(lat[i][j] for j in ms)

    def center(ms):
        ordered = [v for v in pi if v in ms]
        best = min(total(i, ms) for i in ordered)
        return next(i for i in ordered if total(i, ms) <= best + 1e-9 * max(best, 1.0))

    def diam(ms):
        return max((lat[i][j] for i in ms for j in ms), default=0.0)

    node = {"members": frozenset(members), "center": center(members), "children": []}
    if diam(members) <= lt * (1 + 1e-9):
        return node
    left = set(members)
    for v in pi:
        if v in left:
            ball = {u for u in left if lat[v][u] <= (d / alpha) * (1 + 1e-9)}
            left -= ball
            node["children"].append(naive_hcs(lat, ball, d / alpha, lt, pi, alpha))
    return node


def as_plain(c):
    return {"members": c.members, "center": c.center,
            "children": [as_plain(ch) for ch in c.children]}


def shape(tree):
    return [(nd.id, nd.parent, sorted(nd.members), nd.center) for nd in tree.nodes]


def random_points(n, seed, scale=10.0):
    rng = random.Random(seed)
    sites = [PopSite(i, str(i), rng.uniform(0, scale), rng.uniform(0, scale)) for i in range(n)]
    return metric_closure(sites, None, euclidean)


def test_bounded():
    g = l5()
    assert bounded({2}, g, 1.0)
    assert bounded({3, 4}, g, 1.0)
    assert not bounded({0, 1, 2}, g, 1.0)


def test_random_clustering_examples():
    g = l5()
    cs = random_clustering(range(5), 2.0, g, IDENTITY5)
    assert [(sorted(c.members), c.center) for c in cs] == [([0, 1, 2], 1), ([3, 4], 3)]
    whole = random_clustering(range(5), g.diameter, g, IDENTITY5)
    assert len(whole) == 1 and whole[0].members == frozenset(range(5))
    sq = random_clustering(range(4), 0.707, unit_square(), (0, 1, 2, 3))
    assert sorted(sorted(c.members) for c in sq) == [[0], [1], [2], [3]]


def test_l5_tree_by_hand():
    g = l5()
    t = build_tree(g, HcsParams(lt=1.0, pi=IDENTITY5))
    assert shape(t) == [
        (0, None, [0, 1, 2, 3, 4], 2),
        (1, 0, [0, 1, 2], 1),
        (2, 1, [0, 1], 0),
        (3, 1, [2], 2),
        (4, 0, [3, 4], 3),
    ]
    assert [(p, c, lat) for p, c, lat in t.edges()] == [
        (0, 1, 1.0), (1, 2, 1.0), (1, 3, 1.0), (0, 4, 1.0)]
    for p, c, lat in t.edges():
        assert lat == g.l(t.center(p), t.center(c))
    assert t.height == 2
    assert check_tree(t, g) == []


def test_l5_path_latency():
    g = l5()
    t = build_tree(g, HcsParams(lt=1.0, pi=IDENTITY5))
    # 0 -> leaf{0,1}(0) -> 1 -> 2 -> leaf{3,4}(3) -> 3
    assert tree_path_latency(t, g, 0, 3) == 3.0
    assert tree_path_latency(t, g, 0, 3) == g.l(0, 3)
    assert tree_path_latency(t, g, 4, 4) == 0.0
    with pytest.raises(KeyError):
        tree_path_latency(t, g, 0, 9)


def test_unit_square_tree_by_hand():
    g = unit_square()
    t = build_tree(g, HcsParams(lt=0.5, pi=(0, 1, 2, 3)))
    root = t.nodes[t.root]
    assert root.center == 0  # all totals tie at 2 + sqrt(2); pi picks A
    assert sorted(t.center(c) for c in root.children) == [0, 1, 2, 3]
    assert all(t.is_leaf(c) for c in root.children)
    lat = {t.center(c): t.nodes[c].latency for c in root.children}
    assert lat[1] == 1.0 and lat[3] == 1.0 and lat[0] == 0.0
    assert lat[2] == pytest.approx(math.sqrt(2), rel=1e-12)
    assert tree_path_latency(t, g, 1, 2) == pytest.approx(1 + math.sqrt(2), rel=1e-12)
    assert g.l(1, 2) == 1.0
    assert check_tree(t, g) == []


def test_small_diameter_gives_single_leaf():
    g = l5()
    t = build_tree(g, HcsParams(lt=10.0))
    assert len(t.nodes) == 1 and t.edges() == [] and t.height == 0
    assert t.leaves() == [0]
    one = build_tree(metric_closure([PopSite(0, "a", 0.0, 0.0)]), HcsParams(lt=1.0))
    assert len(one.nodes) == 1 and check_tree(one, None) == []


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 24), st.integers(0, 10_000), st.floats(0.2, 3.0))
def test_matches_naive_reference(n, seed, lt):
    g = random_points(n, seed)
    pi = make_permutation(n, seed)
    lat = g.latency.tolist()
    mine = hcs(range(n), g.diameter, g, lt, pi)
    assert as_plain(mine) == naive_hcs(lat, set(range(n)), g.diameter, lt, pi)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_structural_invariants(n, seed, lt):
    g = random_points(n, seed)
    t = build_tree(g, HcsParams(lt=lt, seed=seed))
    assert check_tree(t, g) == []
    assert t.height <= depth_bound(g.diameter, lt)
    leaves = [t.nodes[x].members for x in t.leaves()]
    assert sum(len(m) for m in leaves) == n
    assert frozenset().union(*leaves) == frozenset(range(n))
    over = overlay_matrix(t, g)
    assert np.all(over >= g.latency - 1e-9)
    for u in range(min(n, 5)):
        for v in range(n):
            assert over[u, v] == pytest.approx(tree_path_latency(t, g, u, v), rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000))
def test_deterministic_and_json_roundtrip(n, seed):
    g = random_points(n, seed)
    a = build_tree(g, HcsParams(lt=0.5, seed=seed))
    b = build_tree(g, HcsParams(lt=0.5, seed=seed))
    assert a.to_json() == b.to_json()
    back = LlpTree.from_json(a.to_json())
    assert back.to_json() == a.to_json()
    assert check_tree(back, g) == []


def test_check_tree_reports_faults():
    g = l5()
    t = build_tree(g, HcsParams(lt=1.0, pi=IDENTITY5))
    t.nodes[4].latency = 50.0
    faults = check_tree(t, g)
    assert any("disagrees" in f for f in faults)
    assert any("level-" in f for f in faults)


def test_params_validation():
    with pytest.raises(ValueError):
        HcsParams(lt=0.0)
    with pytest.raises(ValueError):
        HcsParams(lt=1.0, alpha=1.0)
    with pytest.raises(ValueError):
        HcsParams(lt=1.0, pi=(0, 0, 1)).permutation(3)


@pytest.mark.slow
def test_mean_inflation_grows_at_most_logarithmically():
    ratios = {}
    for n in (16, 32, 64, 128):
        means = []
        for seed in range(20):
            g = random_points(n, 1000 * n + seed)
            t = build_tree(g, HcsParams(lt=0.25, seed=seed))
            over = overlay_matrix(t, g)
            off = ~np.eye(n, dtype=bool)
            means.append(float(np.mean(over[off] / g.latency[off] - 1.0)))
        ratios[n] = np.mean(means) / math.log2(n)
    print("mean inflation / log2(n):", {n: round(r, 4) for n, r in ratios.items()})
    c = ratios[16]
    assert all(r <= 1.5 * c for r in ratios.values())
