"""Per-node mapping state of the LLP overlay and its update/forwarding procedures.

One :class:`LlpState` is a single simulation timeline over an immutable tree:
location updates mutate the per-node :class:`MappingTable` objects in order,
connection setup requests (CSRs) read them.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Optional

from .hcs import LlpTree
from .topo import MetricGraph

DISCOVERY_MS = 38.0


class Access(str, Enum):
    FIVE_G = "5G"
    WIFI = "WiFi"
    ETHERNET = "Ethernet"


class ProtocolError(KeyError):
    pass


@dataclass(frozen=True)
class AccessBinding:
    gip: str
    access: str
    pip: str
    leaf: int
    attach_latency: float = 0.0  # MN <-> leaf node


class ChildEntry(NamedTuple):
    child: int


@dataclass
class MappingTable:
    """Entry maps are nested as gip -> access -> value so lookups stay per-gip."""

    # pip, leaves only
    leaf_entries: dict = field(default_factory=dict)
    # child logical node
    child_entries: dict = field(default_factory=dict)
    # gip -> number of registered accesses
    total_access_count: dict = field(default_factory=dict)
    # leaf logical node reached by a shortcut from here
    shortcut_entries: dict = field(default_factory=dict)
    # nodes holding a shortcut into this leaf (S_v)
    sv_set: frozenset = frozenset()

    @staticmethod
    def put(table: dict, gip, access, value) -> None:
        table.setdefault(gip, {})[access] = value

    @staticmethod
    def get(table: dict, gip, access):
        return table.get(gip, {}).get(access)

    @staticmethod
    def pop(table: dict, gip, access):
        inner = table.get(gip)
        if inner is None:
            return None
        out = inner.pop(access, None)
        if not inner:
            del table[gip]
        return out

    def accesses(self, gip) -> set:
        out = set()
        for table in (self.leaf_entries, self.child_entries, self.shortcut_entries):
            out.update(table.get(gip, ()))
        return out

    def holds(self, gip) -> bool:
        return (gip in self.total_access_count or gip in self.leaf_entries
                or gip in self.child_entries or gip in self.shortcut_entries)


@dataclass
class UpdateTrace:
    op: str
    gip: str
    access: str
    # (node, kind): kind in pip, pointer, flip, delete, shortcut_add,
    # shortcut_withdraw, count
    nodes_touched: list = field(default_factory=list)
    messages: list = field(default_factory=list)  # (src, dst, latency)
    ack_node: Optional[int] = None
    ack_latency: float = 0.0
    disruption: Optional[float] = None

    @property
    def mapping_nodes(self) -> list:
        """Distinct nodes whose forwarding state changed, count refreshes excluded."""
        seen = []
        for node, kind in self.nodes_touched:
            if kind != "count" and node not in seen:
                seen.append(node)
        return seen

    def to_json(self) -> dict:
        return {
            "op": self.op, "gip": self.gip, "access": self.access,
            "touched": [[n, k] for n, k in self.nodes_touched],
            "messages": [[s, d, lat] for s, d, lat in self.messages],
            "ack_node": self.ack_node, "ack_latency": self.ack_latency,
            "disruption": self.disruption,
        }


@dataclass
class DeliveryTrace:
    gip: str
    cn_site: int
    start_leaf: int
    hops: list = field(default_factory=list)  # (node, edge latency into it)
    times: list = field(default_factory=list)  # arrival time at each hop
    copies: dict = field(default_factory=dict)  # access -> arrival latency at the MN
    missing: list = field(default_factory=list)

    @property
    def delivered(self) -> bool:
        return bool(self.copies) and not self.missing

    @property
    def setup_latency(self) -> Optional[float]:
        return min(self.copies.values()) if self.copies else None

    @property
    def visited(self) -> list:
        return [n for n, _ in self.hops]


class LlpState:
    def __init__(self, tree: LlpTree, graph: MetricGraph, record: bool = False):
        self.tree = tree
        self.graph = graph
        self.tables = [MappingTable() for _ in tree.nodes]
        for leaf in tree.leaves():
            self.tables[leaf].sv_set = frozenset(tree.shortcut_sources(leaf))
        self.bindings: dict = {}  # gip -> access -> AccessBinding
        self.record = record
        self.events: list = []

    # helpers

    def binding(self, gip, access) -> Optional[AccessBinding]:
        return self.bindings.get(gip, {}).get(access)

    def _edge(self, child: int) -> float:
        return self.tree.nodes[child].latency

    def _hop(self, a: int, b: int) -> float:
        return self.graph.l(self.tree.center(a), self.tree.center(b))

    def _n_accesses(self, gip) -> int:
        # Counted per access, not per distinct leaf: with two accesses on one
        # leaf and a third elsewhere, a leaf-based count lets the ascend test
        # stop before the third access is known.
        return len(self.bindings.get(gip, ()))

    def _drop_if_empty(self, node: int, gip) -> None:
        t = self.tables[node]
        if gip not in t.leaf_entries and gip not in t.child_entries \
                and gip not in t.shortcut_entries:
            t.total_access_count.pop(gip, None)

    def _log(self, trace) -> None:
        if self.record:
            self.events.append(trace.to_json())

    def _finish(self, trace: UpdateTrace, terminal: int, t_terminal: float,
                binding: AccessBinding) -> UpdateTrace:
        trace.ack_node = terminal
        trace.ack_latency = (t_terminal + self._hop(terminal, binding.leaf)
                             + binding.attach_latency)
        self._log(trace)
        return trace

    def _sync_count(self, gip, trace: UpdateTrace, updated: set) -> None:
        """Push the current access count to every holder not already updated."""
        n = self._n_accesses(gip)
        root = self.tree.root
        for node in sorted(self.expected_holders(gip)):
            t = self.tables[node]
            if t.total_access_count.get(gip) == n:
                continue
            t.total_access_count[gip] = n
            if node in updated:
                continue
            trace.nodes_touched.append((node, "count"))
            src = self.tree.nodes[node].parent
            trace.messages.append((root if src is None else src, node,
                                   0.0 if src is None else self._edge(node)))

    def _shortcut_sync(self, gip, access, old_leaf, new_leaf, trace, origin) -> None:
        """Withdraw shortcut entries into ``old_leaf`` and add ones into ``new_leaf``."""
        withdraw = self.tables[old_leaf].sv_set if old_leaf is not None else frozenset()
        add = self.tables[new_leaf].sv_set if new_leaf is not None else frozenset()
        n = self._n_accesses(gip)
        for u in sorted(withdraw | add):
            t = self.tables[u]
            trace.messages.append((origin, u, self._hop(origin, u)))
            if u in add:
                MappingTable.put(t.shortcut_entries, gip, access, new_leaf)
                if n:
                    t.total_access_count[gip] = n
                trace.nodes_touched.append((u, "shortcut_add"))
            else:
                MappingTable.pop(t.shortcut_entries, gip, access)
                trace.nodes_touched.append((u, "shortcut_withdraw"))
                self._drop_if_empty(u, gip)

    def expected_holders(self, gip) -> set:
        out = set()
        for b in self.bindings.get(gip, {}).values():
            out.update(self.tree.path_to_root(b.leaf))
            out.update(self.tables[b.leaf].sv_set)
        return out

    # location updates

    def register(self, binding: AccessBinding) -> UpdateTrace:
        gip, access = binding.gip, binding.access
        if not self.tree.is_leaf(binding.leaf):
            raise ProtocolError(f"node {binding.leaf} is not a leaf")
        old = self.binding(gip, access)
        if old is not None:
            if old == binding:
                return UpdateTrace("register", gip, access)
            return self.move(gip, access, binding.leaf, binding.pip, binding.attach_latency)
        trace = UpdateTrace("register", gip, access)
        self.bindings.setdefault(gip, {})[access] = binding
        n = self._n_accesses(gip)
        leaf = binding.leaf
        MappingTable.put(self.tables[leaf].leaf_entries, gip, access, binding.pip)
        self.tables[leaf].total_access_count[gip] = n
        trace.nodes_touched.append((leaf, "pip"))
        updated = {leaf}
        prev, t = leaf, 0.0
        for x in self.tree.path_to_root(leaf)[1:]:
            t += self._edge(prev)
            trace.messages.append((prev, x, self._edge(prev)))
            MappingTable.put(self.tables[x].child_entries, gip, access, ChildEntry(prev))
            self.tables[x].total_access_count[gip] = n
            trace.nodes_touched.append((x, "pointer"))
            updated.add(x)
            prev = x
        self._shortcut_sync(gip, access, None, leaf, trace, leaf)
        updated.update(self.tables[leaf].sv_set)
        self._sync_count(gip, trace, updated)
        return self._finish(trace, prev, t, binding)

    def move(self, gip, access, new_leaf: int, new_pip: str,
             attach_latency: Optional[float] = None) -> UpdateTrace:
        old = self.binding(gip, access)
        if old is None:
            raise ProtocolError(f"no binding for {(gip, access)}")
        if not self.tree.is_leaf(new_leaf):
            raise ProtocolError(f"node {new_leaf} is not a leaf")
        attach = old.attach_latency if attach_latency is None else attach_latency
        binding = AccessBinding(gip, access, new_pip, new_leaf, attach)
        trace = UpdateTrace("move", gip, access)
        self.bindings[gip][access] = binding
        if new_leaf == old.leaf:
            MappingTable.put(self.tables[new_leaf].leaf_entries, gip, access, new_pip)
            trace.nodes_touched.append((new_leaf, "pip"))
            return self._finish(trace, new_leaf, 0.0, binding)

        n = self._n_accesses(gip)
        MappingTable.put(self.tables[new_leaf].leaf_entries, gip, access, new_pip)
        self.tables[new_leaf].total_access_count[gip] = n
        trace.nodes_touched.append((new_leaf, "pip"))
        # climb until the old path is met, then flip the pointer there
        prev, t = new_leaf, 0.0
        for x in self.tree.path_to_root(new_leaf)[1:]:
            t += self._edge(prev)
            trace.messages.append((prev, x, self._edge(prev)))
            table = self.tables[x]
            stale = MappingTable.get(table.child_entries, gip, access)
            MappingTable.put(table.child_entries, gip, access, ChildEntry(prev))
            table.total_access_count[gip] = n
            if stale is not None:
                trace.nodes_touched.append((x, "flip"))
                break
            trace.nodes_touched.append((x, "pointer"))
            prev = x
        else:
            raise AssertionError("old path never met; state is inconsistent")
        # delete walk down the old branch
        cur, y = x, stale.child
        while True:
            t += self._edge(y)
            trace.messages.append((cur, y, self._edge(y)))
            table = self.tables[y]
            trace.nodes_touched.append((y, "delete"))
            if self.tree.is_leaf(y):
                MappingTable.pop(table.leaf_entries, gip, access)
                self._drop_if_empty(y, gip)
                break
            nxt = MappingTable.pop(table.child_entries, gip, access).child
            self._drop_if_empty(y, gip)
            cur, y = y, nxt
        self._shortcut_sync(gip, access, old.leaf, new_leaf, trace, old.leaf)
        return self._finish(trace, y, t, binding)

    def deregister(self, gip, access) -> UpdateTrace:
        old = self.binding(gip, access)
        if old is None:
            raise ProtocolError(f"no binding for {(gip, access)}")
        del self.bindings[gip][access]
        if not self.bindings[gip]:
            del self.bindings[gip]
        trace = UpdateTrace("deregister", gip, access)
        leaf = old.leaf
        MappingTable.pop(self.tables[leaf].leaf_entries, gip, access)
        self._drop_if_empty(leaf, gip)
        trace.nodes_touched.append((leaf, "delete"))
        updated = {leaf}
        prev, t = leaf, 0.0
        for x in self.tree.path_to_root(leaf)[1:]:
            t += self._edge(prev)
            trace.messages.append((prev, x, self._edge(prev)))
            MappingTable.pop(self.tables[x].child_entries, gip, access)
            self._drop_if_empty(x, gip)
            trace.nodes_touched.append((x, "delete"))
            updated.add(x)
            prev = x
        self._shortcut_sync(gip, access, leaf, None, trace, leaf)
        updated.update(self.tables[leaf].sv_set)
        self._sync_count(gip, trace, updated)
        return self._finish(trace, prev, t, old)

    # connection setup

    def forward_csr(self, cn_site: int, gip, cn_leg: float = 0.0) -> DeliveryTrace:
        """Route a CSR from the CN's leaf to every registered access of ``gip``.

        The request climbs while the current node knows fewer accesses than
        the gip's total (or knows nothing), fanning copies down child
        pointers and across shortcuts. Accesses already served travel with
        the request so no access is sent a second copy.
        """
        tree = self.tree
        start = tree.leaf_of(cn_site)
        trace = DeliveryTrace(gip, cn_site, start)
        wanted = self.bindings.get(gip, {})
        covered: set = set()
        t = cn_leg + self.graph.l(cn_site, tree.center(start))
        trace.hops.append((start, 0.0))
        trace.times.append(t)

        def visit(node, lat, t_node):
            trace.hops.append((node, lat))
            trace.times.append(t_node)

        def deliver(leaf, accesses, t_leaf):
            entries = self.tables[leaf].leaf_entries.get(gip, {})
            for a in sorted(accesses):
                if a in entries and a in wanted:
                    trace.copies[a] = t_leaf + wanted[a].attach_latency
                else:
                    trace.missing.append(a)

        def descend(node, accesses, t_node):
            if tree.is_leaf(node):
                deliver(node, accesses, t_node)
                return
            entries = self.tables[node].child_entries.get(gip, {})
            groups = defaultdict(set)
            for a in accesses:
                if a in entries:
                    groups[entries[a].child].add(a)
                else:
                    trace.missing.append(a)
            for child in sorted(groups):
                lat = self._edge(child)
                visit(child, lat, t_node + lat)
                descend(child, groups[child], t_node + lat)

        node = start
        while True:
            table = self.tables[node]
            here = set(table.leaf_entries.get(gip, ())) - covered
            if here:
                covered |= here
                deliver(node, here, t)
            jumps = defaultdict(set)
            for a, dst in table.shortcut_entries.get(gip, {}).items():
                if a not in covered:
                    jumps[dst].add(a)
            for dst in sorted(jumps):
                covered |= jumps[dst]
                lat = self._hop(node, dst)
                visit(dst, lat, t + lat)
                deliver(dst, jumps[dst], t + lat)
            groups = defaultdict(set)
            for a, e in table.child_entries.get(gip, {}).items():
                if a not in covered:
                    groups[e.child].add(a)
            for child in sorted(groups):
                covered |= groups[child]
                lat = self._edge(child)
                visit(child, lat, t + lat)
                descend(child, groups[child], t + lat)
            total = table.total_access_count.get(gip)
            if total is not None and len(covered) >= total:
                break
            parent = tree.nodes[node].parent
            if parent is None:
                break
            t += self._edge(node)
            visit(parent, self._edge(node), t)
            node = parent
        trace.missing.extend(sorted(set(wanted) - covered - set(trace.missing)))
        return trace

    # invariants

    def check_entry_placement(self) -> tuple[bool, list]:
        """Compare every table with the state implied by the current bindings."""
        violations = []
        gips = set(self.bindings)
        for t in self.tables:
            gips.update(t.leaf_entries, t.child_entries, t.shortcut_entries,
                        t.total_access_count)
        for gip in sorted(gips, key=str):
            expect = self.expected_holders(gip)
            actual = {i for i, t in enumerate(self.tables) if t.holds(gip)}
            for node in sorted(actual - expect):
                violations.append((gip, node, "stale entry"))
            for node in sorted(expect - actual):
                violations.append((gip, node, "missing entry"))
            n = self._n_accesses(gip)
            for node in sorted(expect & actual):
                if self.tables[node].total_access_count.get(gip) != n:
                    violations.append((gip, node, "wrong access count"))
            want = {}  # (node, table name) -> {access: value}
            for a, b in self.bindings.get(gip, {}).items():
                want.setdefault((b.leaf, "leaf"), {})[a] = b.pip
                path = self.tree.path_to_root(b.leaf)
                for child, x in zip(path, path[1:]):
                    want.setdefault((x, "child"), {})[a] = ChildEntry(child)
                for u in self.tables[b.leaf].sv_set:
                    want.setdefault((u, "shortcut"), {})[a] = b.leaf
            for node in sorted(actual | expect):
                t = self.tables[node]
                for name, table in (("leaf", t.leaf_entries), ("child", t.child_entries),
                                    ("shortcut", t.shortcut_entries)):
                    have = table.get(gip, {})
                    if have != want.get((node, name), {}):
                        violations.append((gip, node, f"{name} entries {have}"))
        return not violations, violations

    def entries_for(self, gip) -> dict:
        """Nodes holding state for ``gip``, split into tree-path and shortcut-only holders."""
        tree_nodes, extra = set(), set()
        for i, t in enumerate(self.tables):
            if gip in t.leaf_entries or gip in t.child_entries:
                tree_nodes.add(i)
            elif t.holds(gip):
                extra.add(i)
        return {"tree": tree_nodes, "shortcut": extra}

    def write_events(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


def direct_path_latency(graph: MetricGraph, cn_site: int, mn_site: int,
                        cn_leg: float = 0.0, mn_leg: float = 0.0) -> float:
    """Post-setup latency: CN and MN talk over the direct underlay path."""
    return cn_leg + graph.l(cn_site, mn_site) + mn_leg


def llp_disruption(graph: MetricGraph, mn_site: int, cn_site: int,
                   mn_leg: float = 0.0, cn_leg: float = 0.0,
                   discovery: float = DISCOVERY_MS) -> float:
    """Detection time plus one direct MN -> CN update; the tree update runs in parallel."""
    return discovery + direct_path_latency(graph, cn_site, mn_site, cn_leg, mn_leg)
