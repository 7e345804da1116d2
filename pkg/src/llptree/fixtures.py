"""Small hand-checkable topologies and generators for the real-data fixtures.

Topology Zoo graphs are exported from the ``topohub`` package and population
points from ``geonamescache``; nothing third-party is stored in this repo.
"""
from __future__ import annotations

import csv
import json
import math
import xml.etree.ElementTree as ET
from pathlib import Path

from .hcs import Cluster, HcsParams, LlpTree, materialize_tree
from .topo import MetricGraph, PopSite, metric_closure

# US networks used by the evaluation; Arpanet19728 is the reference topology.
ZOO_TOPOLOGIES = ("Arpanet19728", "Agis", "Internetmci", "Xspedius", "Bellsouth", "Iris")

# contiguous US
US_BOX = (24.0, 50.0, -125.5, -66.5)


def euclidean(a: PopSite, b: PopSite) -> float:
    return math.hypot(a.lat - b.lat, a.lon - b.lon)


def line_graph(n: int = 5, step: float = 1.0) -> MetricGraph:
    """Path 0-1-...-(n-1) with ``step`` ms links, so l(i, j) = |i - j| * step."""
    sites = [PopSite(i, f"L{i}", 0.0, float(i)) for i in range(n)]
    edges = [(i, i + 1, step) for i in range(n - 1)]
    return metric_closure(sites, edges)


def l5() -> MetricGraph:
    return line_graph(5)


def unit_square() -> MetricGraph:
    """A(0,0) B(1,0) C(1,1) D(0,1) under plain Euclidean latency."""
    pts = [("A", 0.0, 0.0), ("B", 1.0, 0.0), ("C", 1.0, 1.0), ("D", 0.0, 1.0)]
    sites = [PopSite(i, nm, y, x) for i, (nm, x, y) in enumerate(pts)]
    return metric_closure(sites, None, euclidean)


def star(spokes: int = 6, radius_deg: float = 2.0) -> MetricGraph:
    """Hub in Kansas with ``spokes`` sites on a ring, linked only through the hub."""
    hub = PopSite(0, "hub", 39.0, -98.0)
    sites = [hub]
    for k in range(spokes):
        ang = 2 * math.pi * k / spokes
        sites.append(PopSite(k + 1, f"spoke{k}", 39.0 + radius_deg * math.sin(ang),
                             -98.0 + radius_deg * math.cos(ang)))
    return metric_closure(sites, [(0, k, None) for k in range(1, spokes + 1)])


SYNTHETIC = {"l5": l5, "square": unit_square, "star": star}


def figure_tree() -> tuple[MetricGraph, LlpTree]:
    """Six-node tree laid out like the protocol walkthrough figures.

    Node k sits at site k. Root 0 has child 1; node 1 has children 2 and 5;
    node 2 has leaves 3 and 4. Sites 0..2 are folded into the leaves so the
    leaf clusters still partition the site set.
    """
    coords = [(0.0, 0.0), (0.0, -1.0), (-1.0, -2.0), (-1.5, -3.0), (-0.5, -3.0), (1.0, -2.0)]
    sites = [PopSite(i, f"n{i}", y, x) for i, (x, y) in enumerate(coords)]
    graph = metric_closure(sites, None, euclidean)
    leaf3 = Cluster(frozenset({3}), 3, 0.5, 3)
    leaf4 = Cluster(frozenset({4, 2}), 4, 0.5, 3)
    leaf5 = Cluster(frozenset({5, 0, 1}), 5, 1.0, 2)
    n2 = Cluster(frozenset({2, 3, 4}), 2, 1.0, 2, [leaf3, leaf4])
    n1 = Cluster(frozenset(range(6)), 1, 2.0, 1, [n2, leaf5])
    n0 = Cluster(frozenset(range(6)), 0, 4.0, 0, [n1])
    tree = materialize_tree(n0, graph, HcsParams(lt=4.0), pi=list(range(6)),
                            diameter=graph.diameter)
    return graph, tree


def _load_topohub(name: str) -> dict:
    try:
        import topohub
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise RuntimeError("the topohub package is needed to export Topology Zoo fixtures") from exc
    return topohub.get(f"topozoo/{name}")


def write_graphml(name: str, nodes, edges, path) -> None:
    """Write nodes [(id, label, lat, lon)] and edges [(src, dst)] in Topology Zoo layout."""
    ns = "http://graphml.graphdrawing.org/xmlns"
    ET.register_namespace("", ns)
    root = ET.Element(f"{{{ns}}}graphml")
    for kid, target, attr, typ in (("d0", "graph", "Network", "string"),
                                   ("d1", "node", "Latitude", "double"),
                                   ("d2", "node", "Longitude", "double"),
                                   ("d3", "node", "label", "string")):
        ET.SubElement(root, f"{{{ns}}}key", {"id": kid, "for": target,
                                             "attr.name": attr, "attr.type": typ})
    g = ET.SubElement(root, f"{{{ns}}}graph", {"edgedefault": "undirected"})
    ET.SubElement(g, f"{{{ns}}}data", {"key": "d0"}).text = name
    for nid, label, lat, lon in nodes:
        el = ET.SubElement(g, f"{{{ns}}}node", {"id": str(nid)})
        if lat is not None:
            ET.SubElement(el, f"{{{ns}}}data", {"key": "d1"}).text = repr(float(lat))
        if lon is not None:
            ET.SubElement(el, f"{{{ns}}}data", {"key": "d2"}).text = repr(float(lon))
        ET.SubElement(el, f"{{{ns}}}data", {"key": "d3"}).text = label
    for s, t in edges:
        ET.SubElement(g, f"{{{ns}}}edge", {"source": str(s), "target": str(t)})
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


def export_zoo(name: str, out_dir) -> Path:
    doc = _load_topohub(name)
    nodes = [(n["id"], n.get("name") or str(n["id"]), n["pos"][1], n["pos"][0])
             for n in doc["nodes"]]
    edges = [(e["source"], e["target"]) for e in doc["edges"]]
    path = Path(out_dir) / f"{name}.graphml"
    write_graphml(name, nodes, edges, path)
    return path


def export_population(path, min_population: int = 50_000, box=US_BOX) -> Path:
    """US places above ``min_population`` as a name/latitude/longitude/population CSV."""
    try:
        import geonamescache
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise RuntimeError("the geonamescache package is needed to export population data") from exc
    cities = geonamescache.GeonamesCache().get_cities()
    lat0, lat1, lon0, lon1 = box
    rows = sorted(
        (c for c in cities.values()
         if c["countrycode"] == "US" and c["population"] >= min_population
         and lat0 <= c["latitude"] <= lat1 and lon0 <= c["longitude"] <= lon1),
        key=lambda c: c["geonameid"],
    )
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "latitude", "longitude", "population"])
        for c in rows:
            w.writerow([f"{c['name']}, {c['admin1code']}", c["latitude"], c["longitude"],
                        c["population"]])
    return path


def export_all(out_dir, names=ZOO_TOPOLOGIES) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {n: str(export_zoo(n, out_dir)) for n in names}
    written["population"] = str(export_population(out_dir / "us_population.csv"))
    (out_dir / "MANIFEST.json").write_text(json.dumps(written, indent=2, sort_keys=True))
    return written
