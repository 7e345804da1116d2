"""Hierarchical cluster selection (HCS) and the LLP overlay tree.

The builder recursively partitions the site set with random ball carving
(each gathering radius is the previous one divided by ``alpha``) until a
cluster's latency diameter drops to ``lt``. Every cluster becomes one logical
tree node placed at its center site.
"""
from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .topo import REL_TOL, MetricGraph


def leq(a: float, b: float) -> bool:
    """``a <= b`` with the relative slack used for all latency comparisons."""
    return a <= b + REL_TOL * max(abs(a), abs(b)) + 1e-15


def make_permutation(n: int, seed: int) -> list[int]:
    order = list(range(n))
    random.Random(seed).shuffle(order)
    return order


@dataclass
class HcsParams:
    lt: float
    alpha: float = 2.0
    seed: int = 0
    pi: Optional[tuple] = None

    def __post_init__(self):
        if not self.lt > 0:
            raise ValueError("lt must be positive")
        if not self.alpha > 1:
            raise ValueError("alpha must exceed 1")

    def permutation(self, n: int) -> list[int]:
        if self.pi is not None:
            pi = list(self.pi)
            if sorted(pi) != list(range(n)):
                raise ValueError("pi is not a permutation of the site ids")
            return pi
        return make_permutation(n, self.seed)


@dataclass
class Cluster:
    members: frozenset
    center: int
    clt: float  # gathering radius this cluster was formed with (D(G) at the root)
    depth: int = 0
    children: list["Cluster"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


def _rank(pi: Sequence[int]) -> dict:
    return {v: k for k, v in enumerate(pi)}


def bounded(members, graph: MetricGraph, lt: float) -> bool:
    idx = sorted(members)
    if len(idx) < 2:
        return True
    sub = graph.latency[np.ix_(idx, idx)]
    return leq(float(sub.max()), lt)


def central_node(members, graph: MetricGraph, rank: dict) -> int:
    """Member with the least total latency to the others; ties by pi order."""
    idx = sorted(members, key=rank.__getitem__)
    totals = graph.latency[np.ix_(idx, idx)].sum(axis=1)
    best = totals.min()
    for site, tot in zip(idx, totals):
        if leq(tot, best):
            return site
    raise AssertionError("unreachable")


def random_clustering(members, clt: float, graph: MetricGraph, pi: Sequence[int]) -> list[Cluster]:
    rank = _rank(pi)
    unresolved = set(members)
    clusters = []
    for v in pi:
        if not unresolved:
            break
        if v not in unresolved:
            continue
        ball = {u for u in unresolved if leq(graph.l(v, u), clt)}
        unresolved -= ball
        clusters.append(Cluster(frozenset(ball), central_node(ball, graph, rank), clt))
    return clusters


def hcs(members, d: float, graph: MetricGraph, lt: float, pi: Sequence[int],
        alpha: float = 2.0, depth: int = 0, _rank_cache=None) -> Cluster:
    rank = _rank_cache or _rank(pi)
    members = frozenset(members)
    node = Cluster(members, central_node(members, graph, rank), d, depth)
    if bounded(members, graph, lt):
        return node
    for c in random_clustering(members, d / alpha, graph, pi):
        node.children.append(hcs(c.members, d / alpha, graph, lt, pi, alpha, depth + 1, rank))
    return node


@dataclass
class TreeNode:
    id: int
    center: int
    members: frozenset
    depth: int
    level: int
    clt: float
    parent: Optional[int] = None
    children: list = field(default_factory=list)
    latency: float = 0.0  # to parent


def scale_levels(diameter: float, lt: float) -> int:
    """Level of the root: one above the finest gathering scale that can occur."""
    if not diameter > lt * (1 + REL_TOL):
        return 0
    return math.ceil(math.log2(diameter / lt) - 1e-9) + 1


def depth_bound(diameter: float, lt: float) -> int:
    if diameter <= lt:
        return 0
    return math.ceil(math.log2(diameter / lt) - 1e-9) + 2


@dataclass
class LlpTree:
    nodes: list[TreeNode]
    root: int
    params: HcsParams
    diameter: float
    pi: list
    heuristics: list = field(default_factory=list)
    # from logical node -> set of leaf logical nodes
    shortcuts: dict = field(default_factory=dict)

    def __post_init__(self):
        self._reindex()

    def _reindex(self):
        self._leaf_of = {}
        for nd in self.nodes:
            if not nd.children:
                for s in nd.members:
                    self._leaf_of[s] = nd.id
        self._anc = {}

    # structure queries

    def __len__(self):
        return len(self.nodes)

    @property
    def height(self) -> int:
        return max(nd.depth for nd in self.nodes)

    def leaves(self) -> list[int]:
        return [nd.id for nd in self.nodes if not nd.children]

    def is_leaf(self, nid: int) -> bool:
        return not self.nodes[nid].children

    def leaf_of(self, site: int) -> int:
        try:
            return self._leaf_of[site]
        except KeyError:
            raise KeyError(f"unknown site {site}") from None

    def center(self, nid: int) -> int:
        return self.nodes[nid].center

    def ancestors(self, nid: int) -> tuple[list[int], list[float]]:
        """Nodes from ``nid`` up to the root, with cumulative latency to each."""
        hit = self._anc.get(nid)
        if hit is None:
            path, cum = [nid], [0.0]
            cur = self.nodes[nid]
            while cur.parent is not None:
                cum.append(cum[-1] + cur.latency)
                cur = self.nodes[cur.parent]
                path.append(cur.id)
            hit = self._anc[nid] = (path, cum)
        return hit

    def path_to_root(self, nid: int) -> list[int]:
        return self.ancestors(nid)[0]

    def lca(self, a: int, b: int) -> int:
        on_b = set(self.path_to_root(b))
        for x in self.path_to_root(a):
            if x in on_b:
                return x
        raise AssertionError("nodes in different trees")

    def edges(self) -> list[tuple[int, int, float]]:
        return [(nd.parent, nd.id, nd.latency) for nd in self.nodes if nd.parent is not None]

    def shortcut_list(self, graph: Optional[MetricGraph] = None) -> list[tuple[int, int, float]]:
        out = []
        for src in sorted(self.shortcuts):
            for dst in sorted(self.shortcuts[src]):
                lat = graph.l(self.center(src), self.center(dst)) if graph is not None else math.nan
                out.append((src, dst, lat))
        return out

    def shortcut_sources(self, leaf: int) -> set:
        """The set S_v of nodes holding a shortcut into ``leaf``."""
        return {src for src, dsts in self.shortcuts.items() if leaf in dsts}

    def copy(self) -> "LlpTree":
        return copy.deepcopy(self)

    def to_clusters(self, nid: Optional[int] = None) -> Cluster:
        nd = self.nodes[self.root if nid is None else nid]
        return Cluster(nd.members, nd.center, nd.clt, nd.depth,
                       [self.to_clusters(c) for c in nd.children])

    def reweight(self, graph: MetricGraph) -> None:
        for nd in self.nodes:
            if nd.parent is not None:
                nd.latency = graph.l(self.nodes[nd.parent].center, nd.center)
        self._anc = {}

    # serialization

    def to_json(self, graph: Optional[MetricGraph] = None) -> dict:
        return {
            "params": {
                "lt": self.params.lt,
                "alpha": self.params.alpha,
                "seed": self.params.seed,
                "pi": list(self.pi),
                "diameter": self.diameter,
                "heuristics": list(self.heuristics),
            },
            "root": self.root,
            "nodes": [
                {"id": nd.id, "level": nd.level, "depth": nd.depth, "center": nd.center,
                 "members": sorted(nd.members), "parent": nd.parent, "clt": nd.clt}
                for nd in self.nodes
            ],
            "edges": [{"parent": p, "child": c, "latency": lat} for p, c, lat in self.edges()],
            "shortcuts": [{"from": s, "to": t, "latency": lat}
                          for s, t, lat in self.shortcut_list(graph)],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "LlpTree":
        p = doc["params"]
        params = HcsParams(float(p["lt"]), float(p.get("alpha", 2.0)), int(p.get("seed", 0)),
                           tuple(p["pi"]) if p.get("pi") is not None else None)
        nodes = [
            TreeNode(int(n["id"]), int(n["center"]), frozenset(int(m) for m in n["members"]),
                     int(n["depth"]), int(n["level"]), float(n["clt"]),
                     None if n.get("parent") is None else int(n["parent"]))
            for n in doc["nodes"]
        ]
        for i, nd in enumerate(nodes):
            if nd.id != i:
                raise ValueError(f"node ids must be 0..n-1 in order (got {nd.id} at {i})")
        for e in doc.get("edges", []):
            child = nodes[int(e["child"])]
            child.latency = float(e["latency"])
            nodes[int(e["parent"])].children.append(child.id)
        shortcuts: dict = {}
        for s in doc.get("shortcuts", []):
            shortcuts.setdefault(int(s["from"]), set()).add(int(s["to"]))
        return cls(nodes, int(doc["root"]), params, float(p["diameter"]),
                   list(p.get("pi") or []), list(p.get("heuristics", [])), shortcuts)


def materialize_tree(root: Cluster, graph: MetricGraph, params: HcsParams,
                     pi: Optional[Sequence[int]] = None, diameter: Optional[float] = None,
                     heuristics=()) -> LlpTree:
    """Turn a cluster tree into logical nodes numbered in DFS pre-order."""
    diameter = graph.diameter if diameter is None else diameter
    top = scale_levels(diameter, params.lt)
    single = root.is_leaf
    nodes: list[TreeNode] = []

    def visit(c: Cluster, parent: Optional[int]):
        nid = len(nodes)
        lat = 0.0 if parent is None else graph.l(nodes[parent].center, c.center)
        level = 0 if single else max(top - c.depth, 0)
        nodes.append(TreeNode(nid, c.center, c.members, c.depth, level, c.clt, parent, [], lat))
        if parent is not None:
            nodes[parent].children.append(nid)
        for ch in c.children:
            visit(ch, nid)

    visit(root, None)
    pi = list(pi) if pi is not None else params.permutation(graph.n)
    return LlpTree(nodes, 0, params, diameter, pi, list(heuristics))


def build_tree(graph: MetricGraph, params: HcsParams) -> LlpTree:
    pi = params.permutation(graph.n)
    d = graph.diameter
    root = hcs(range(graph.n), d if d > 0 else params.lt, graph, params.lt, pi, params.alpha)
    return materialize_tree(root, graph, params, pi, d)


def leaf_latency(tree: LlpTree, graph: MetricGraph, a: int, b: int) -> float:
    """Overlay latency from leaf node ``a`` to leaf node ``b``.

    Climbs from ``a``; the first node below the common ancestor holding a
    shortcut into ``b`` jumps straight there.
    """
    if a == b:
        return 0.0
    path_a, cum_a = tree.ancestors(a)
    path_b, cum_b = tree.ancestors(b)
    pos_b = {x: k for k, x in enumerate(path_b)}
    cb = tree.center(b)
    for k, x in enumerate(path_a):
        if x in pos_b:
            return cum_a[k] + cum_b[pos_b[x]]
        dsts = tree.shortcuts.get(x)
        if dsts and b in dsts:
            return cum_a[k] + graph.l(tree.center(x), cb)
    raise AssertionError("leaves share no ancestor")


def tree_path_latency(tree: LlpTree, graph: MetricGraph, u: int, v: int) -> float:
    """Site-to-site latency through the overlay, including both access legs."""
    if u == v:
        return 0.0
    a, b = tree.leaf_of(u), tree.leaf_of(v)
    return (graph.l(u, tree.center(a)) + leaf_latency(tree, graph, a, b)
            + graph.l(tree.center(b), v))


def overlay_matrix(tree: LlpTree, graph: MetricGraph) -> np.ndarray:
    """All site pairs' overlay latency (row = source)."""
    n = graph.n
    leaves = tree.leaves()
    lid = {x: k for k, x in enumerate(leaves)}
    ll = np.array([[leaf_latency(tree, graph, a, b) for b in leaves] for a in leaves])
    leaf_idx = np.array([lid[tree.leaf_of(s)] for s in range(n)])
    centers = np.array([tree.center(tree.leaf_of(s)) for s in range(n)])
    leg = graph.latency[np.arange(n), centers]
    out = leg[:, None] + ll[np.ix_(leaf_idx, leaf_idx)] + leg[None, :]
    np.fill_diagonal(out, 0.0)
    return out


def check_tree(tree: LlpTree, graph: Optional[MetricGraph] = None) -> list[str]:
    """Structural invariants of a (possibly optimized) tree; returns violations."""
    out = []
    nodes = tree.nodes
    roots = [nd.id for nd in nodes if nd.parent is None]
    if roots != [tree.root]:
        out.append(f"expected exactly one root {tree.root}, found {roots}")
    for nd in nodes:
        if nd.center not in nd.members:
            out.append(f"node {nd.id}: center {nd.center} not a member")
        for c in nd.children:
            if nodes[c].parent != nd.id:
                out.append(f"node {c}: parent link mismatch with {nd.id}")
            if not nodes[c].members <= nd.members:
                out.append(f"node {c}: members not contained in parent {nd.id}")
        if nd.children:
            union = frozenset().union(*(nodes[c].members for c in nd.children))
            if union != nd.members:
                out.append(f"node {nd.id}: children do not cover its members")
    seen: dict = {}
    for leaf in tree.leaves():
        for s in nodes[leaf].members:
            if s in seen:
                out.append(f"site {s} in leaves {seen[s]} and {leaf}")
            seen[s] = leaf
    if set(seen) != set(nodes[tree.root].members):
        out.append("leaves do not partition the site set")
    lt = tree.params.lt
    bound = depth_bound(tree.diameter, lt)
    if tree.height > bound:
        out.append(f"depth {tree.height} exceeds bound {bound}")
    for p, c, lat in tree.edges():
        if graph is not None and not math.isclose(lat, graph.l(nodes[p].center, nodes[c].center),
                                                  rel_tol=REL_TOL, abs_tol=1e-12):
            out.append(f"edge ({p},{c}) latency {lat} disagrees with metric")
        lvl = nodes[p].level
        if not leq(lat, lt * 2 ** lvl):
            out.append(f"level-{lvl} edge ({p},{c}) latency {lat:.6g} > {lt * 2 ** lvl:.6g}")
    for src, dsts in tree.shortcuts.items():
        for d in dsts:
            if not tree.is_leaf(d):
                out.append(f"shortcut {src}->{d} does not end at a leaf")
    return out
