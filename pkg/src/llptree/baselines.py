"""Latency models for the comparison systems: a single mobility anchor and LISP."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .hcs import LlpTree
from .protocol import DISCOVERY_MS
from .topo import MetricGraph


class BaselineKind(str, Enum):
    CENTRALIZED = "centralized"
    LISP_MISS = "lisp_miss"


@dataclass(frozen=True)
class BaselineConfig:
    anchor_site: int
    kind: BaselineKind = BaselineKind.CENTRALIZED

    @classmethod
    def for_tree(cls, tree: LlpTree, graph: MetricGraph,
                 kind: BaselineKind = BaselineKind.CENTRALIZED) -> "BaselineConfig":
        """Anchor (and map server) at the site hosting the tree root."""
        cfg = cls(tree.center(tree.root), kind)
        cfg.validate(graph)
        return cfg

    def validate(self, graph: MetricGraph) -> None:
        if not 0 <= self.anchor_site < graph.n:
            raise ValueError(f"anchor site {self.anchor_site} not in graph")


def centralized_csr_latency(graph: MetricGraph, anchor: int, cn: int, mn: int,
                            cn_leg: float = 0.0, mn_leg: float = 0.0) -> float:
    """Every request detours through the anchor."""
    return cn_leg + graph.l(cn, anchor) + graph.l(anchor, mn) + mn_leg


def lisp_miss_csr_latency(graph: MetricGraph, mapserver: int, cn: int, mn: int,
                          cn_leg: float = 0.0, mn_leg: float = 0.0) -> float:
    """First packet after a cache miss: map-request round trip, then direct forwarding."""
    return cn_leg + 2.0 * graph.l(cn, mapserver) + graph.l(cn, mn) + mn_leg


def lisp_update_disruption(graph: MetricGraph, mn_old_leaf: int, mn_new_leaf: int,
                           itr_site: int, mapserver: int, mn_site: Optional[int] = None,
                           discovery: float = DISCOVERY_MS) -> float:
    """Disruption of an established flow when the MN changes ETR.

    ``mn_old_leaf`` and ``mn_new_leaf`` are the ETR sites. The MN registers
    with the new ETR and unregisters from the old one in parallel, the old
    ETR notifies the ITR, and the ITR re-queries the map server. ``mn_site``
    defaults to the new ETR.
    """
    mn = mn_new_leaf if mn_site is None else mn_site
    return (discovery
            + max(graph.l(mn, mn_new_leaf), graph.l(mn, mn_old_leaf))
            + graph.l(mn_old_leaf, itr_site)
            + 2.0 * graph.l(itr_site, mapserver))


def lisp_worst_case_entries(tree: LlpTree) -> int:
    """Full replication: every logical node caches every mapping."""
    return len(tree.nodes)
