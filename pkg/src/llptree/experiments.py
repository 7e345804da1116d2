"""Population-weighted workloads and the latency, memory and update experiments."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baselines import (BaselineConfig, centralized_csr_latency, lisp_miss_csr_latency,
                        lisp_update_disruption, lisp_worst_case_entries)
from .hcs import HcsParams, LlpTree, build_tree
from .protocol import AccessBinding, LlpState, llp_disruption
from .topo import County, MetricGraph, TopologyError, geodesic_latency, haversine_km, nearest_sites
from .treeopt import HEURISTICS, InflationPolicy, optimize, split_policy

SCHEMA_VERSION = 1
DEFAULT_BUCKET_EDGES = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0)
SIBLING_FRACTION = 0.7
ACCESS = "5G"
SYSTEMS = ("tree", "centralized", "lisp")
TREE_MUTATIONS = ("pip", "pointer", "flip", "delete")


def sig6(x):
    """Round to six significant digits, the precision of every emitted number."""
    if x is None or isinstance(x, (bool, int)) or not math.isfinite(x):
        return x
    return float(f"{x:.6g}")


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return "" if x is None else str(x)


@dataclass(frozen=True)
class LatencyBucket:
    lo: float
    hi: float

    def contains(self, x: float) -> bool:
        return self.lo <= x < self.hi

    @property
    def label(self) -> str:
        return f"[{self.lo:g},{self.hi:g})"


def make_buckets(edges: Sequence[float] = DEFAULT_BUCKET_EDGES) -> list[LatencyBucket]:
    """Contiguous buckets between consecutive edges plus an open-ended last one."""
    edges = [float(e) for e in edges]
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly increasing")
    out = [LatencyBucket(a, b) for a, b in zip(edges, edges[1:])]
    out.append(LatencyBucket(edges[-1], math.inf))
    if edges[0] > 0:
        out.insert(0, LatencyBucket(0.0, edges[0]))
    return out


def bucket_of(buckets: Sequence[LatencyBucket], x: float) -> LatencyBucket:
    for b in buckets:
        if b.contains(x):
            return b
    return buckets[-1]


# -- workload ----------------------------------------------------------------

@dataclass(frozen=True)
class Connection:
    cn_county: int
    mn_county: int
    cn_site: int
    mn_site: int


@dataclass(frozen=True)
class Move:
    gip: str
    access: str
    from_leaf: int
    to_leaf: int
    from_site: int
    to_site: int
    cn_site: int


@dataclass
class Workload:
    counties: list
    connections: list
    moves: list
    seed: int
    # gip -> initial site of each mobile node
    mobiles: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "counties": [asdict(c) for c in self.counties],
            "connections": [asdict(c) for c in self.connections],
            "moves": [asdict(m) for m in self.moves],
            "mobiles": self.mobiles,
        }


def site_counties(graph: MetricGraph) -> list[County]:
    """One unit-population county at every site, for graphs without population data."""
    return [County(s.name, s.lat, s.lon, 1.0) for s in graph.sites]


def filter_counties(counties: Sequence[County], graph: MetricGraph,
                    margin_deg: float = 1.0) -> list[County]:
    """Counties inside the topology's bounding box (padded by ``margin_deg``)."""
    lats = [s.lat for s in graph.sites]
    lons = [s.lon for s in graph.sites]
    lat0, lat1 = min(lats) - margin_deg, max(lats) + margin_deg
    lon0, lon1 = min(lons) - margin_deg, max(lons) + margin_deg
    return [c for c in counties if lat0 <= c.lat <= lat1 and lon0 <= c.lon <= lon1]


def pair_probabilities(counties: Sequence[County]) -> np.ndarray:
    """P(a, b) proportional to pop(a) pop(b) / max(dist_km, 1), zero on the diagonal."""
    lat = np.array([c.lat for c in counties])
    lon = np.array([c.lon for c in counties])
    pop = np.array([c.population for c in counties], dtype=float)
    dist = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    p = np.outer(pop, pop) / np.maximum(dist, 1.0)
    np.fill_diagonal(p, 0.0)
    total = p.sum()
    if not total > 0:
        raise ValueError("population weights give no valid endpoint pair")
    return p / total


def gen_workload(counties: Sequence[County], graph: MetricGraph, tree: LlpTree,
                 n_connections: int, n_moves: int, seed: int,
                 sibling_fraction: float = SIBLING_FRACTION,
                 n_mobiles: Optional[int] = None) -> Workload:
    """Sample connections by the gravity law and a sequential move trace.

    Each move relocates one of ``n_mobiles`` mobile nodes to a uniformly
    chosen leaf. With probability ``sibling_fraction`` the leaf is drawn
    from the leaves under the current leaf's parent (the current leaf
    included, which models a new access point in the same metro);
    otherwise from all leaves. The new attachment site is a member of the
    target leaf drawn by site weight, and the correspondent of the active
    flow is drawn like a connection endpoint.
    """
    if not counties:
        raise ValueError("no counties")
    if len(counties) < 2:
        raise ValueError("need at least two counties to draw endpoint pairs")
    if n_connections < 0 or n_moves < 0:
        raise ValueError("workload sizes must be nonnegative")
    counties = list(counties)
    rng = np.random.Generator(np.random.PCG64(seed))
    sites = nearest_sites(graph, counties)
    m = len(counties)

    p = pair_probabilities(counties).ravel()
    picks = rng.choice(m * m, size=n_connections, p=p) if n_connections else []
    connections = [Connection(int(k // m), int(k % m), int(sites[k // m]), int(sites[k % m]))
                   for k in picks]

    pop = np.array([c.population for c in counties], dtype=float)
    pop_p = pop / pop.sum() if pop.sum() > 0 else np.full(m, 1.0 / m)
    n_mobiles = n_mobiles or max(1, min(100, n_moves))
    mobiles, where = {}, {}
    for k in range(n_mobiles if n_moves else 0):
        gip = f"mn{k}"
        site = int(sites[rng.choice(m, p=pop_p)])
        mobiles[gip] = site
        where[gip] = site

    weights = graph.weights
    leaves = tree.leaves()
    moves = []
    for _ in range(n_moves):
        gip = f"mn{int(rng.integers(n_mobiles))}"
        site = where[gip]
        leaf = tree.leaf_of(site)
        parent = tree.nodes[leaf].parent
        local = ([c for c in tree.nodes[parent].children if tree.is_leaf(c)]
                 if parent is not None else leaves)
        pool = local if rng.random() < sibling_fraction else leaves
        target = int(pool[rng.integers(len(pool))])
        members = [x for x in sorted(tree.nodes[target].members) if x != site] or [site]
        w = weights[members]
        to_site = int(members[rng.choice(len(members), p=w / w.sum())])
        cn_site = int(sites[rng.choice(m, p=pop_p)])
        moves.append(Move(gip, ACCESS, leaf, target, site, to_site, cn_site))
        where[gip] = to_site
    return Workload(counties, connections, moves, seed, mobiles)


# -- experiments -------------------------------------------------------------

def _leg(county: County, site, graph: MetricGraph) -> float:
    return geodesic_latency(county, graph.sites[site])


def _inflation(x: float, direct: float) -> float:
    if direct <= 0:
        return 0.0 if x <= 0 else math.inf
    return x / direct - 1.0


def _stats(values) -> dict:
    if not values:
        return {"n": 0, "mean": None, "p50": None, "p90": None, "p99": None}
    a = np.asarray(values, dtype=float)
    return {"n": int(a.size), "mean": sig6(float(a.mean())),
            "p50": sig6(float(np.percentile(a, 50))),
            "p90": sig6(float(np.percentile(a, 90))),
            "p99": sig6(float(np.percentile(a, 99)))}


def inflation_aggregates(records: Sequence[dict], buckets: Sequence[LatencyBucket]) -> dict:
    """Overall and per-bucket inflation statistics, recomputable from the records."""
    overall = {s: _stats([r[f"infl_{s}"] for r in records]) for s in SYSTEMS}
    overall["direct_ms"] = _stats([r["direct"] for r in records])
    per_bucket = []
    for b in buckets:
        rows = [r for r in records if r["bucket"] == b.label]
        entry = {"bucket": b.label, "lo": b.lo, "hi": None if math.isinf(b.hi) else b.hi}
        for s in SYSTEMS:
            entry[s] = _stats([r[f"infl_{s}"] for r in rows])
        per_bucket.append(entry)
    return {"overall": overall, "buckets": per_bucket}


def cdf_table(records: Sequence[dict]) -> list[dict]:
    """Sorted inflation values per system with cumulative fraction."""
    out = []
    for s in SYSTEMS:
        vals = sorted(r[f"infl_{s}"] for r in records)
        n = len(vals)
        for k, v in enumerate(vals, 1):
            out.append({"system": s, "inflation": v, "fraction": sig6(k / n)})
    return out


def run_inflation(tree: LlpTree, graph: MetricGraph, workload: Workload,
                  baseline: Optional[BaselineConfig] = None,
                  buckets: Optional[Sequence[LatencyBucket]] = None) -> dict:
    """Connection setup latency through the tree and both baselines for every connection."""
    baseline = baseline or BaselineConfig.for_tree(tree, graph)
    buckets = list(buckets or make_buckets())
    anchor = baseline.anchor_site
    state = LlpState(tree, graph)
    records = []
    for k, c in enumerate(workload.connections):
        cn_leg = _leg(workload.counties[c.cn_county], c.cn_site, graph)
        mn_leg = _leg(workload.counties[c.mn_county], c.mn_site, graph)
        leaf = tree.leaf_of(c.mn_site)
        gip = f"c{k}"
        attach = mn_leg + graph.l(c.mn_site, tree.center(leaf))
        state.register(AccessBinding(gip, ACCESS, f"pip-{k}", leaf, attach))
        trace = state.forward_csr(c.cn_site, gip, cn_leg)
        state.deregister(gip, ACCESS)
        if not trace.delivered:
            raise AssertionError(f"connection {k} undeliverable: {trace.missing}")
        direct = sig6(cn_leg + graph.l(c.cn_site, c.mn_site) + mn_leg)
        lat = {
            "tree": sig6(trace.setup_latency),
            "centralized": sig6(centralized_csr_latency(graph, anchor, c.cn_site, c.mn_site,
                                                        cn_leg, mn_leg)),
            "lisp": sig6(lisp_miss_csr_latency(graph, anchor, c.cn_site, c.mn_site,
                                               cn_leg, mn_leg)),
        }
        rec = {"idx": k, "cn_county": c.cn_county, "mn_county": c.mn_county,
               "cn_site": c.cn_site, "mn_site": c.mn_site, "direct": direct,
               "bucket": bucket_of(buckets, direct).label}
        for s in SYSTEMS:
            rec[s] = lat[s]
        for s in SYSTEMS:
            rec[f"infl_{s}"] = sig6(_inflation(lat[s], direct))
        records.append(rec)
    return {"records": records, "aggregates": inflation_aggregates(records, buckets),
            "cdf": cdf_table(records),
            "buckets": [[b.lo, None if math.isinf(b.hi) else b.hi] for b in buckets]}


def memory_aggregates(records: Sequence[dict], worst: int, height: int) -> dict:
    tree_mean = float(np.mean([r["tree_entries"] for r in records])) if records else 0.0
    return {
        "gips": len(records),
        "mean_tree_entries": sig6(tree_mean),
        "mean_shortcut_extra": sig6(float(np.mean([r["shortcut_extra"] for r in records]))
                                    if records else 0.0),
        "mean_leaf_depth_plus_one": sig6(float(np.mean([r["leaf_depth"] + 1 for r in records]))
                                         if records else 0.0),
        "height": height,
        "worst_case_entries": worst,
        "worst_over_tree": sig6(worst / tree_mean) if tree_mean else None,
    }


def run_memory(tree: LlpTree, graph: MetricGraph, workload: Workload) -> dict:
    """Mapping entries each mobile node's gip occupies once every node is registered."""
    state = LlpState(tree, graph)
    registered = []
    for k, c in enumerate(workload.connections):
        registered.append((f"c{k}", c.mn_site))
    for gip, site in sorted(workload.mobiles.items()):
        registered.append((gip, site))
    for gip, site in registered:
        state.register(AccessBinding(gip, ACCESS, f"pip-{gip}", tree.leaf_of(site)))
    records = []
    for gip, site in registered:
        held = state.entries_for(gip)
        leaf = tree.leaf_of(site)
        records.append({"gip": gip, "site": site, "leaf": leaf,
                        "leaf_depth": tree.nodes[leaf].depth,
                        "tree_entries": len(held["tree"]),
                        "shortcut_extra": len(held["shortcut"])})
    ok, violations = state.check_entry_placement()
    if not ok:
        raise AssertionError(f"entry placement violated: {violations[:5]}")
    worst = lisp_worst_case_entries(tree)
    return {"records": records, "aggregates": memory_aggregates(records, worst, tree.height)}


def update_aggregates(records: Sequence[dict], buckets: Sequence[LatencyBucket]) -> dict:
    def block(rows):
        return {"llp_disruption": _stats([r["llp_disruption"] for r in rows]),
                "lisp_disruption": _stats([r["lisp_disruption"] for r in rows]),
                "nodes_touched": _stats([r["nodes_touched"] for r in rows]),
                "shortcut_touched": _stats([r["shortcut_touched"] for r in rows])}

    out = {"overall": block(records), "buckets": []}
    llp = out["overall"]["llp_disruption"]["mean"]
    lisp = out["overall"]["lisp_disruption"]["mean"]
    out["overall"]["lisp_over_llp"] = sig6(lisp / llp) if llp else None
    for b in buckets:
        entry = {"bucket": b.label, "lo": b.lo, "hi": None if math.isinf(b.hi) else b.hi}
        entry.update(block([r for r in records if r["bucket"] == b.label]))
        out["buckets"].append(entry)
    return out


def run_update(tree: LlpTree, graph: MetricGraph, workload: Workload,
               baseline: Optional[BaselineConfig] = None,
               buckets: Optional[Sequence[LatencyBucket]] = None,
               events_path=None) -> dict:
    """Replay the move trace, recording disruption and mapping nodes touched per move."""
    baseline = baseline or BaselineConfig.for_tree(tree, graph)
    buckets = list(buckets or make_buckets())
    state = LlpState(tree, graph, record=events_path is not None)

    def attach(site, leaf):
        return graph.l(site, tree.center(leaf))

    for gip, site in sorted(workload.mobiles.items()):
        leaf = tree.leaf_of(site)
        state.register(AccessBinding(gip, ACCESS, f"pip-{gip}-0", leaf, attach(site, leaf)))
    records = []
    for k, mv in enumerate(workload.moves):
        trace = state.move(mv.gip, mv.access, mv.to_leaf, f"pip-{mv.gip}-{k + 1}",
                           attach(mv.to_site, mv.to_leaf))
        tree_nodes = {n for n, kind in trace.nodes_touched if kind in TREE_MUTATIONS}
        etr_old, etr_new = tree.center(mv.from_leaf), tree.center(mv.to_leaf)
        itr = tree.center(tree.leaf_of(mv.cn_site))
        ours = llp_disruption(graph, mv.to_site, mv.cn_site)
        trace.disruption = ours
        theirs = lisp_update_disruption(graph, etr_old, etr_new, itr, baseline.anchor_site,
                                        mn_site=mv.to_site)
        move_ms = sig6(graph.l(mv.from_site, mv.to_site))
        records.append({
            "idx": k, "gip": mv.gip, "from_leaf": mv.from_leaf, "to_leaf": mv.to_leaf,
            "from_site": mv.from_site, "to_site": mv.to_site, "cn_site": mv.cn_site,
            "move_latency": move_ms, "bucket": bucket_of(buckets, move_ms).label,
            "nodes_touched": len(tree_nodes),
            "shortcut_touched": len(set(trace.mapping_nodes) - set(tree_nodes)),
            "count_refreshes": sum(1 for _, kind in trace.nodes_touched if kind == "count"),
            "ack_node": trace.ack_node, "ack_latency": sig6(trace.ack_latency),
            "llp_disruption": sig6(ours), "lisp_disruption": sig6(theirs),
        })
    ok, violations = state.check_entry_placement()
    if not ok:
        raise AssertionError(f"entry placement violated: {violations[:5]}")
    if events_path is not None:
        state.write_events(events_path)
    return {"records": records, "aggregates": update_aggregates(records, buckets)}


# -- orchestration and reports -----------------------------------------------

@dataclass
class ExperimentConfig:
    lt: float = 2.0
    alpha: float = 2.0
    seed: int = 0
    heuristics: tuple = HEURISTICS
    policy: Optional[InflationPolicy] = None
    connections: int = 10_000
    moves: int = 1_000
    bucket_edges: tuple = DEFAULT_BUCKET_EDGES
    sibling_fraction: float = SIBLING_FRACTION
    # explicit site order for HCS; None draws it from the seed
    pi: Optional[tuple] = None

    def to_json(self) -> dict:
        return {"lt": self.lt, "alpha": self.alpha, "seed": self.seed,
                "heuristics": list(self.heuristics),
                "policy": self.policy.to_json() if self.policy else None,
                "connections": self.connections, "moves": self.moves,
                "bucket_edges": list(self.bucket_edges),
                "sibling_fraction": self.sibling_fraction,
                "pi": list(self.pi) if self.pi is not None else None}


def make_tree(graph: MetricGraph, cfg: ExperimentConfig) -> LlpTree:
    tree = build_tree(graph, HcsParams(cfg.lt, cfg.alpha, cfg.seed, cfg.pi))
    policy = cfg.policy or split_policy(graph)
    return optimize(tree, graph, cfg.heuristics, policy)


@dataclass
class ExperimentReport:
    provenance: dict
    params: dict
    tree: dict = field(default_factory=dict)
    inflation: Optional[dict] = None
    memory: Optional[dict] = None
    update: Optional[dict] = None

    def to_json(self) -> dict:
        doc = {"schema_version": SCHEMA_VERSION, "provenance": self.provenance,
               "params": self.params, "tree": self.tree}
        for name in ("inflation", "memory", "update"):
            section = getattr(self, name)
            if section is not None:
                doc[name] = section
        return doc

    def write(self, out_dir, fmt: str = "csv") -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [out_dir / "report.json"]
        written[0].write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        if fmt != "csv":
            return written
        if self.inflation is not None:
            written.append(_write_csv(out_dir / "inflation.csv", INFLATION_COLUMNS,
                                      self.inflation["records"]))
            written.append(_write_csv(out_dir / "cdf.csv", CDF_COLUMNS, self.inflation["cdf"]))
        if self.memory is not None:
            written.append(_write_csv(out_dir / "memory.csv", MEMORY_COLUMNS,
                                      self.memory["records"]))
        if self.update is not None:
            written.append(_write_csv(out_dir / "update.csv", UPDATE_COLUMNS,
                                      self.update["records"]))
        return written


INFLATION_COLUMNS = ("idx", "cn_county", "mn_county", "cn_site", "mn_site", "bucket", "direct",
                     "tree", "centralized", "lisp", "infl_tree", "infl_centralized", "infl_lisp")
CDF_COLUMNS = ("system", "inflation", "fraction")
MEMORY_COLUMNS = ("gip", "site", "leaf", "leaf_depth", "tree_entries", "shortcut_extra")
UPDATE_COLUMNS = ("idx", "gip", "from_leaf", "to_leaf", "from_site", "to_site", "cn_site",
                  "move_latency", "bucket", "nodes_touched", "shortcut_touched",
                  "count_refreshes", "ack_node", "ack_latency", "llp_disruption",
                  "lisp_disruption")


def _write_csv(path: Path, columns, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema_version", *columns])
        for r in rows:
            w.writerow([SCHEMA_VERSION, *(_fmt(r[c]) for c in columns)])
    return path


def digest(path) -> Optional[str]:
    if path is None:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tree_summary(tree: LlpTree, graph: MetricGraph) -> dict:
    return {"nodes": len(tree.nodes), "leaves": len(tree.leaves()), "height": tree.height,
            "shortcuts": len(tree.shortcut_list()), "heuristics": list(tree.heuristics),
            "root_center": tree.center(tree.root), "diameter": sig6(graph.diameter)}


def run_experiments(graph: MetricGraph, counties: Sequence[County], cfg: ExperimentConfig,
                    which=("inflation", "memory", "update"), topology: str = "",
                    inputs: Sequence = (), events_path=None,
                    tree: Optional[LlpTree] = None) -> ExperimentReport:
    """Build the tree (unless given) and run the selected experiments on one workload."""
    counties = filter_counties(counties, graph) or list(counties)
    if len(counties) < 2:
        raise TopologyError("fewer than two population points near the topology")
    if tree is None:
        tree = make_tree(graph, cfg)
    n_conn = cfg.connections if ("inflation" in which or "memory" in which) else 0
    n_moves = cfg.moves if "update" in which else 0
    wl = gen_workload(counties, graph, tree, n_conn, n_moves, cfg.seed, cfg.sibling_fraction)
    buckets = make_buckets(cfg.bucket_edges)
    baseline = BaselineConfig.for_tree(tree, graph)
    report = ExperimentReport(
        provenance={"topology": topology, "version": f"llptree-{__version__}",
                    "inputs": {Path(p).name: digest(p) for p in inputs},
                    "counties": len(counties)},
        params=cfg.to_json(),
        tree=tree_summary(tree, graph),
    )
    if "inflation" in which:
        report.inflation = run_inflation(tree, graph, wl, baseline, buckets)
    if "memory" in which:
        report.memory = run_memory(tree, graph, wl)
    if "update" in which:
        report.update = run_update(tree, graph, wl, baseline, buckets, events_path)
    return report
