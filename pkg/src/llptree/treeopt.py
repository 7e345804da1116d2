"""Post-processing of HCS trees: center reset, detour stretching, shortcuts."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .hcs import Cluster, LlpTree, hcs, leaf_latency, leq, materialize_tree, tree_path_latency
from .topo import MetricGraph

log = logging.getLogger(__name__)

SPLIT_MS = 10.0


def latency_inflation(tree: LlpTree, graph: MetricGraph, u: int, v: int) -> float:
    if u == v:
        raise ValueError("latency inflation is undefined for u == v")
    direct = graph.l(u, v)
    return tree_path_latency(tree, graph, u, v) / direct - 1.0


# -- center reset ------------------------------------------------------------

def center_objective(members: Sequence[int], i: int, parent: Optional[int],
                     graph: MetricGraph, exclude_self_weight: bool = False) -> float:
    """Weighted mean latency from ``i`` to the rest of the cluster, plus the hop to ``parent``."""
    idx = np.fromiter(members, dtype=np.int64)
    w = graph.weights[idx]
    lat = graph.latency[i, idx]
    num = float(np.dot(w, lat))  # l(i, i) = 0, so j = i drops out
    den = float(w.sum()) - (graph.sites[i].weight if exclude_self_weight else 0.0)
    val = num / den if den > 0 else 0.0
    if parent is not None:
        val += graph.l(i, parent)
    return val


def _best_center(members, parent, graph, rank) -> int:
    order = sorted(members, key=rank.__getitem__)
    scores = [center_objective(members, i, parent, graph) for i in order]
    best = min(scores)
    choice = next(i for i, s in zip(order, scores) if leq(s, best))
    if log.isEnabledFor(logging.DEBUG) and len(order) > 1:
        alt = [center_objective(members, i, parent, graph, True) for i in order]
        log.debug("center reset %s: score %.6g (self-excluded denominator %.6g) -> %d",
                  sorted(members), best, min(alt), choice)
    return choice


def _reset_cluster(c: Cluster, parent_center: Optional[int], graph, rank, fixed=False):
    if not fixed:
        c.center = _best_center(c.members, parent_center, graph, rank)
    for ch in c.children:
        _reset_cluster(ch, c.center, graph, rank)


def reset_centers(tree: LlpTree, graph: MetricGraph) -> LlpTree:
    """Re-pick every center top-down to balance intra-cluster and parent latency."""
    rank = {v: k for k, v in enumerate(tree.pi)}
    root = tree.to_clusters()
    _reset_cluster(root, None, graph, rank)
    out = _rematerialize(tree, root, graph)
    if "centers" not in out.heuristics:
        out.heuristics.append("centers")
    return out


def _rematerialize(tree: LlpTree, root: Cluster, graph: MetricGraph) -> LlpTree:
    out = materialize_tree(root, graph, tree.params, tree.pi, tree.diameter, tree.heuristics)
    if tree.shortcuts:
        raise ValueError("restructure trees before adding shortcuts")
    return out


# -- detour stretching -------------------------------------------------------

def _walk(c: Cluster, parent: Optional[Cluster] = None, path: tuple = ()):
    """Clusters in DFS pre-order with their child-index path from the root.

    The position in this walk is the logical node id after materializing.
    Paths stay unique when a cluster and its child share a member set.
    """
    yield c, parent, path
    for k, ch in enumerate(c.children):
        yield from _walk(ch, c, path + (k,))


def _first_detour(tree: LlpTree, graph: MetricGraph, skip=frozenset()):
    root = tree.to_clusters()
    centers = {nd.center for nd in tree.nodes}
    for nid, (c, parent, path) in enumerate(_walk(root)):
        if parent is None or path in skip:
            continue
        n1, n2 = c.center, parent.center
        if n1 == n2:
            continue
        # interior path nodes only; each differs from n1, so it centers another cluster
        hits = [x for x in graph.underlay_path(n1, n2)[1:-1] if x in c.members and x in centers]
        if hits:
            return nid, path, hits[-1]
    return None


def find_detour(tree: LlpTree, graph: MetricGraph):
    """First (logical node, new center) pair whose parent link passes another center.

    Returns ``None`` when the tree has no detour left.
    """
    hit = _first_detour(tree, graph)
    return None if hit is None else (hit[0], hit[2])


def stretch_detours(tree: LlpTree, graph: MetricGraph, max_rounds: int = 50) -> LlpTree:
    """Move centers onto deployed nodes their parent link already crosses.

    After a switch the subtree under the cluster is rebuilt with HCS (and
    re-centered when center reset was applied before). A cluster is switched
    at most once per round.
    """
    cur = tree
    rank = {v: k for k, v in enumerate(tree.pi)}
    p = tree.params
    for _ in range(max_rounds):
        switched: set = set()
        while True:
            hit = _first_detour(cur, graph, frozenset(switched))
            if hit is None:
                break
            _, path, n3 = hit
            root = cur.to_clusters()
            parent, c = None, root
            for k in path:
                parent, c = c, c.children[k]
            fresh = hcs(c.members, c.clt, graph, p.lt, cur.pi, p.alpha, c.depth, rank)
            fresh.center = n3
            if "centers" in cur.heuristics:
                _reset_cluster(fresh, parent.center, graph, rank, fixed=True)
            parent.children[path[-1]] = fresh
            cur = _rematerialize(cur, root, graph)
            switched.add(path)
        if not switched:
            break
    else:
        log.warning("detour stretching stopped after %d rounds", max_rounds)
    out = cur.copy() if cur is tree else cur
    if "detours" not in out.heuristics:
        out.heuristics.append("detours")
    return out


# -- inflation policies and shortcuts ----------------------------------------

@dataclass
class InflationPolicy:
    # (lo_ms, hi_ms, epsilon); ranges are half-open except the last
    ranges: list

    def __post_init__(self):
        self.ranges = [(float(a), float(b), float(e)) for a, b, e in self.ranges]
        if not self.ranges:
            raise ValueError("policy needs at least one range")
        prev_hi, prev_eps = None, -math.inf
        for lo, hi, eps in self.ranges:
            if hi < lo or eps < 0:
                raise ValueError(f"bad range ({lo}, {hi}, {eps})")
            if prev_hi is not None and not math.isclose(lo, prev_hi, rel_tol=1e-9):
                raise ValueError("ranges must be contiguous")
            if eps < prev_eps:
                raise ValueError("epsilons must be nondecreasing")
            prev_hi, prev_eps = hi, eps

    def index(self, latency: float) -> int:
        for k, (lo, hi, _) in enumerate(self.ranges):
            if latency < hi:
                return k
        return len(self.ranges) - 1

    def epsilon(self, latency: float) -> float:
        return self.ranges[self.index(latency)][2]

    def to_json(self) -> list:
        return [{"lo": lo, "hi": hi, "eps": eps} for lo, hi, eps in self.ranges]

    @classmethod
    def from_json(cls, doc) -> "InflationPolicy":
        return cls([(r["lo"], r["hi"], r["eps"]) for r in doc])


def split_epsilon(lo: float, hi: float) -> float:
    return 0.1 if lo < SPLIT_MS else 1.0


def default_policy(graph: MetricGraph,
                   epsilon: Callable[[float, float], float] = split_epsilon) -> InflationPolicy:
    """Power-of-two ranges [d 2^(i-1), d 2^i) spanning the metric's [d, D]."""
    d, D = graph.min_latency, graph.diameter
    if d <= 0:
        return InflationPolicy([(0.0, 0.0, epsilon(0.0, 0.0))])
    k = max(1, math.ceil(math.log2(D / d) - 1e-9))
    ranges = []
    for i in range(1, k + 1):
        lo, hi = d * 2 ** (i - 1), min(d * 2 ** i, D)
        if i == k:
            hi = D
        ranges.append((lo, hi, epsilon(lo, hi)))
    return InflationPolicy(ranges)


def split_policy(graph: MetricGraph, split: float = SPLIT_MS,
                 tight: float = 0.1, loose: float = 1.0) -> InflationPolicy:
    """Two ranges: ``tight`` below ``split`` ms of direct latency, ``loose`` above."""
    d, D = graph.min_latency, graph.diameter
    if D < split:
        return InflationPolicy([(d, D, tight)])
    if d >= split:
        return InflationPolicy([(d, D, loose)])
    return InflationPolicy([(d, split, tight), (split, D, loose)])


def _leaf_pairs(tree: LlpTree, graph: MetricGraph):
    leaves = tree.leaves()
    for a in leaves:
        ca = tree.center(a)
        for b in leaves:
            if a != b:
                yield a, b, graph.l(ca, tree.center(b))


def augment_shortcuts(tree: LlpTree, graph: MetricGraph, policy: InflationPolicy) -> LlpTree:
    """Greedily add directed shortcuts until every leaf pair meets its range's bound."""
    out = tree.copy()
    out.shortcuts = {k: set(v) for k, v in out.shortcuts.items()}
    buckets: dict = {}
    for a, b, direct in _leaf_pairs(out, graph):
        buckets.setdefault(policy.index(direct), []).append((a, b, direct))

    for k in range(len(policy.ranges)):
        eps = policy.ranges[k][2]
        cand = []
        for a, b, direct in buckets.get(k, ()):
            li = leaf_latency(out, graph, a, b) / direct - 1.0
            if not leq(li + 1.0, 1.0 + eps):
                cand.append((-li, a, b, direct))
        cand.sort()
        for _, a, b, direct in cand:
            if leq(leaf_latency(out, graph, a, b), direct * (1 + eps)):
                continue
            path, cum = out.ancestors(a)
            on_b = set(out.path_to_root(b))
            limit = next(i for i, x in enumerate(path) if x in on_b)
            for i in range(limit):
                if b in out.shortcuts.get(path[i], ()):
                    limit = i
                    break
            cb = out.center(b)
            for i in range(limit - 1, -1, -1):
                via = cum[i] + graph.l(out.center(path[i]), cb)
                if leq(via, direct * (1 + eps)):
                    out.shortcuts.setdefault(path[i], set()).add(b)
                    break
    if "shortcuts" not in out.heuristics:
        out.heuristics.append("shortcuts")
    return out


def shortcut_violations(tree: LlpTree, graph: MetricGraph, policy: InflationPolicy) -> list:
    """Leaf pairs whose overlay inflation exceeds their range's epsilon."""
    bad = []
    for a, b, direct in _leaf_pairs(tree, graph):
        eps = policy.epsilon(direct)
        lat = leaf_latency(tree, graph, a, b)
        if not leq(lat, direct * (1 + eps)):
            bad.append((a, b, lat / direct - 1.0, eps))
    return bad


HEURISTICS = ("centers", "detours", "shortcuts")


def optimize(tree: LlpTree, graph: MetricGraph, heuristics=HEURISTICS,
             policy: Optional[InflationPolicy] = None) -> LlpTree:
    """Apply the selected heuristics in their fixed order."""
    unknown = set(heuristics) - set(HEURISTICS)
    if unknown:
        raise ValueError(f"unknown heuristics {sorted(unknown)}")
    if "centers" in heuristics:
        tree = reset_centers(tree, graph)
    if "detours" in heuristics:
        tree = stretch_detours(tree, graph)
    if "shortcuts" in heuristics:
        tree = augment_shortcuts(tree, graph, policy or split_policy(graph))
    return tree
