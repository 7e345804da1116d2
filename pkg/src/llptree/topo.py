"""Topology ingestion and the latency metric over PoP sites.

Sites come from Topology Zoo style GraphML (``Latitude``/``Longitude`` node
keys), latencies are derived from great-circle distance and closed under
shortest paths so the result is a proper metric.
"""
from __future__ import annotations

import csv
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

EARTH_RADIUS_KM = 6371.0088
LIGHT_SPEED_KM_S = 299_792.458
DEFAULT_FACTOR = 2.0
REL_TOL = 1e-9


class TopologyError(ValueError):
    """Input topology or population data could not be used."""


@dataclass(frozen=True)
class PopSite:
    id: int
    name: str
    lat: float
    lon: float
    weight: float = 1.0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise TopologyError(f"site {self.id}: latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise TopologyError(f"site {self.id}: longitude {self.lon} out of range")
        if self.weight < 0:
            raise TopologyError(f"site {self.id}: negative weight")


@dataclass(frozen=True)
class County:
    name: str
    lat: float
    lon: float
    population: float


@dataclass
class Topology:
    """Raw result of reading a topology file."""

    name: str
    sites: list[PopSite]
    # (i, j, latency_ms or None)
    edges: list[tuple[int, int, Optional[float]]]
    dropped: int = 0
    merged: int = 0


@dataclass
class MetricGraph:
    sites: list[PopSite]
    latency: np.ndarray
    # predecessors[i, j] = node before j on the underlay path from i; None when
    # every pair is joined by a direct link
    predecessors: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.sites)

    @property
    def diameter(self) -> float:
        return latency_diameter(self)

    @property
    def min_latency(self) -> float:
        if self.n < 2:
            return 0.0
        off = self.latency[~np.eye(self.n, dtype=bool)]
        return float(off.min())

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.sites], dtype=float)

    def l(self, u: int, v: int) -> float:
        return float(self.latency[u, v])

    def underlay_path(self, u: int, v: int) -> list[int]:
        """Site sequence of the least-latency underlay path from u to v."""
        if u == v:
            return [u]
        if self.predecessors is None:
            return [u, v]
        path = [v]
        cur = v
        while cur != u:
            cur = int(self.predecessors[u, cur])
            if cur < 0:
                return [u, v]
            path.append(cur)
        path.reverse()
        return path

    def with_weights(self, weights: Sequence[float]) -> "MetricGraph":
        sites = [replace(s, weight=float(w)) for s, w in zip(self.sites, weights)]
        return MetricGraph(sites, self.latency, self.predecessors)

    def check(self) -> list[str]:
        """Return a list of metric invariant violations (empty when valid)."""
        out = []
        lat = self.latency
        n = self.n
        if lat.shape != (n, n):
            return [f"latency matrix shape {lat.shape} != ({n}, {n})"]
        if np.any(np.diag(lat) != 0):
            out.append("nonzero diagonal")
        if not np.allclose(lat, lat.T, rtol=0, atol=0):
            out.append("latency matrix not symmetric")
        off = ~np.eye(n, dtype=bool)
        if np.any(lat[off] <= 0):
            out.append("non-positive latency between distinct sites")
        for k in range(n):
            via = lat[:, k][:, None] + lat[k, :][None, :]
            bad = lat > via * (1 + REL_TOL) + 1e-12
            if bad.any():
                i, j = np.argwhere(bad)[0]
                out.append(f"triangle inequality violated: ({i},{j}) via {k}")
                break
        return out

    def to_json(self) -> dict:
        doc = {
            "sites": [
                {"id": s.id, "name": s.name, "lat": s.lat, "lon": s.lon, "weight": s.weight}
                for s in self.sites
            ],
            "latency": self.latency.tolist(),
        }
        if self.predecessors is not None:
            doc["predecessors"] = self.predecessors.tolist()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "MetricGraph":
        sites = [
            PopSite(int(s["id"]), str(s["name"]), float(s["lat"]), float(s["lon"]),
                    float(s.get("weight", 1.0)))
            for s in doc["sites"]
        ]
        pred = doc.get("predecessors")
        return cls(
            sites,
            np.asarray(doc["latency"], dtype=float),
            None if pred is None else np.asarray(pred, dtype=np.int64),
        )


def latency_diameter(graph: MetricGraph) -> float:
    if graph.n < 2:
        return 0.0
    return float(graph.latency.max())


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; accepts scalars or numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def km_to_ms(km, factor: float = DEFAULT_FACTOR):
    return km / LIGHT_SPEED_KM_S * 1000.0 * factor


def geodesic_latency(a, b, factor: float = DEFAULT_FACTOR) -> float:
    """One-way propagation latency in ms between two located points.

    ``factor`` scales vacuum light speed to account for fiber and path
    stretch. Works on anything with ``lat``/``lon`` attributes.
    """
    if factor < 1:
        raise ValueError("propagation factor must be >= 1")
    if a.lat == b.lat and a.lon == b.lon:
        return 0.0
    return float(km_to_ms(haversine_km(a.lat, a.lon, b.lat, b.lon), factor))


def geodesic_model(factor: float = DEFAULT_FACTOR) -> Callable[[PopSite, PopSite], float]:
    return lambda a, b: geodesic_latency(a, b, factor)


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _parse_float(text):
    try:
        val = float(text)
    except (TypeError, ValueError):
        return None
    return val if math.isfinite(val) else None


def load_topology(path, fmt: str = "graphml") -> Topology:
    """Read a GraphML topology into PoP sites and a raw edge list.

    Nodes without usable coordinates are dropped; nodes sharing the exact
    coordinates of an earlier node are merged into it, since two distinct
    sites need a positive latency between them.
    """
    if fmt != "graphml":
        raise TopologyError(f"unsupported topology format {fmt!r}")
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise TopologyError(f"{path}: malformed XML: {exc}") from exc
    except OSError as exc:
        raise TopologyError(f"{path}: cannot read: {exc}") from exc

    keys = {}
    for el in root.iter():
        if _local(el.tag) == "key":
            keys[el.get("id")] = (el.get("attr.name") or el.get("id") or "").lower()

    graph_el = next((el for el in root.iter() if _local(el.tag) == "graph"), None)
    if graph_el is None:
        raise TopologyError(f"{path}: no <graph> element")
    name = path.stem
    for el in graph_el:
        if _local(el.tag) == "data" and keys.get(el.get("key")) in ("network", "label"):
            name = (el.text or name).strip() or name

    def data_of(el):
        out = {}
        for d in el:
            if _local(d.tag) == "data":
                out[keys.get(d.get("key"), d.get("key", "").lower())] = d.text
        return out

    sites: list[PopSite] = []
    index: dict[str, int] = {}
    by_coord: dict[tuple[float, float], int] = {}
    dropped = merged = 0
    for el in graph_el:
        if _local(el.tag) != "node":
            continue
        data = data_of(el)
        lat = _parse_float(data.get("latitude"))
        lon = _parse_float(data.get("longitude"))
        if lat is None or lon is None or not (-90 <= lat <= 90 and -180 <= lon <= 180):
            dropped += 1
            continue
        if (lat, lon) in by_coord:
            index[el.get("id")] = by_coord[(lat, lon)]
            merged += 1
            continue
        sid = len(sites)
        label = (data.get("label") or el.get("id") or str(sid)).strip()
        sites.append(PopSite(sid, label, lat, lon))
        index[el.get("id")] = sid
        by_coord[(lat, lon)] = sid

    if not sites:
        raise TopologyError(f"{path}: no nodes with usable coordinates")

    edges = []
    for el in graph_el:
        if _local(el.tag) != "edge":
            continue
        s, t = index.get(el.get("source")), index.get(el.get("target"))
        if s is None or t is None or s == t:
            continue
        data = data_of(el)
        lat_ms = None
        for k in ("latency", "delay"):
            if k in data:
                lat_ms = _parse_float(data[k])
                break
        edges.append((s, t, lat_ms))
    return Topology(name, sites, edges, dropped, merged)


def metric_closure(
    sites: Sequence[PopSite],
    edges: Optional[Iterable[tuple]] = None,
    latency_model: Optional[Callable[[PopSite, PopSite], float]] = None,
) -> MetricGraph:
    """Complete latency metric over ``sites``.

    With ``edges`` the latency of a pair is its shortest-path distance over
    the edge set (edges lacking an explicit latency use ``latency_model``);
    pairs in different components are linked by a direct model edge first.
    Without edges every pair is joined directly by the model.
    """
    sites = list(sites)
    n = len(sites)
    if n == 0:
        raise TopologyError("metric needs at least one site")
    model = latency_model or geodesic_model()

    if edges is None:
        lat = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                lat[i, j] = lat[j, i] = model(sites[i], sites[j])
        if n > 1 and lat[~np.eye(n, dtype=bool)].min() <= 0:
            raise TopologyError("distinct sites at zero latency")
        return MetricGraph(sites, lat, None)

    weight: dict[tuple[int, int], float] = {}
    for e in edges:
        i, j = int(e[0]), int(e[1])
        w = e[2] if len(e) > 2 else None
        if i == j:
            continue
        if w is None:
            w = model(sites[i], sites[j])
        if not w > 0:
            raise TopologyError(f"non-positive edge latency {w} on ({i}, {j})")
        key = (min(i, j), max(i, j))
        weight[key] = min(w, weight.get(key, math.inf))

    def solve(wts):
        rows, cols, vals = [], [], []
        for (i, j), w in wts.items():
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
        mat = csr_matrix((vals, (rows, cols)), shape=(n, n))
        return shortest_path(mat, method="D", directed=False, return_predecessors=True)

    dist, pred = solve(weight)
    if np.isinf(dist).any():
        for i, j in np.argwhere(np.isinf(dist)):
            if i < j:
                w = model(sites[i], sites[j])
                if not w > 0:
                    raise TopologyError(f"distinct sites {i}, {j} at zero latency")
                weight[(int(i), int(j))] = w
        dist, pred = solve(weight)
    dist = np.minimum(dist, dist.T)
    np.fill_diagonal(dist, 0.0)
    return MetricGraph(sites, dist, pred.astype(np.int64))


def load_population(path) -> tuple[list[County], int]:
    """Read county records from CSV; returns (records, skipped_rows)."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise TopologyError(f"{path}: cannot read: {exc}") from exc
    records, skipped = [], 0
    with fh:
        reader = csv.DictReader(fh)
        cols = {c.strip().lower(): c for c in reader.fieldnames or []}
        need = {"name", "latitude", "longitude", "population"}
        if not need <= cols.keys():
            raise TopologyError(f"{path}: header must contain {sorted(need)}")
        for row in reader:
            lat = _parse_float(row.get(cols["latitude"]))
            lon = _parse_float(row.get(cols["longitude"]))
            pop = _parse_float(row.get(cols["population"]))
            if (lat is None or lon is None or pop is None or pop < 0
                    or not -90 <= lat <= 90 or not -180 <= lon <= 180):
                skipped += 1
                continue
            records.append(County((row.get(cols["name"]) or "").strip(), lat, lon, pop))
    if not records:
        raise TopologyError(f"{path}: no valid population rows")
    return records, skipped


def nearest_sites(graph: MetricGraph, points) -> np.ndarray:
    """Index of the geodesically nearest site for each point (ties: lower id)."""
    lat = np.array([s.lat for s in graph.sites])
    lon = np.array([s.lon for s in graph.sites])
    out = np.empty(len(points), dtype=np.int64)
    for k, p in enumerate(points):
        out[k] = int(np.argmin(haversine_km(p.lat, p.lon, lat, lon)))
    return out


def assign_weights(graph: MetricGraph, counties: Sequence[County]) -> MetricGraph:
    if not counties:
        raise TopologyError("no counties to assign")
    weights = np.zeros(graph.n)
    for c, s in zip(counties, nearest_sites(graph, counties)):
        weights[s] += c.population
    positive = weights[weights > 0]
    if positive.size == 0:
        weights[:] = 1.0
    else:
        weights[weights == 0] = positive.min() * 0.01
    return graph.with_weights(weights)


def save_graph(graph: MetricGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_json()))


def load_graph(path) -> MetricGraph:
    return MetricGraph.from_json(json.loads(Path(path).read_text()))
