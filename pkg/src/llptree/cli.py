"""Command line entry point: build trees, run experiments, validate tree files."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .experiments import (DEFAULT_BUCKET_EDGES, ExperimentConfig, filter_counties, make_tree,
                          run_experiments, site_counties)
from .fixtures import SYNTHETIC, export_all
from .hcs import LlpTree, check_tree
from .topo import (MetricGraph, TopologyError, assign_weights, load_graph, load_population,
                   load_topology, metric_closure)
from .treeopt import HEURISTICS, InflationPolicy

log = logging.getLogger("llptree")

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2


class InvariantError(RuntimeError):
    def __init__(self, violations):
        super().__init__(f"{len(violations)} invariant violation(s)")
        self.violations = list(violations)


def load_metric(spec: str) -> tuple[MetricGraph, str]:
    """``builtin:NAME``, a GraphML topology, or a metric JSON file."""
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in SYNTHETIC:
            raise TopologyError(f"unknown builtin topology {name!r}; have {sorted(SYNTHETIC)}")
        return SYNTHETIC[name](), name
    path = Path(spec)
    if path.suffix.lower() == ".json":
        try:
            return load_graph(path), path.stem
        except (OSError, ValueError, KeyError) as exc:
            raise TopologyError(f"{path}: cannot load metric: {exc}") from exc
    topo = load_topology(path)
    if topo.dropped or topo.merged:
        log.info("%s: dropped %d nodes without coordinates, merged %d co-located",
                 topo.name, topo.dropped, topo.merged)
    return metric_closure(topo.sites, topo.edges), topo.name or path.stem


def _heuristics(text: str) -> tuple:
    names = tuple(h for h in (x.strip() for x in text.split(",")) if h and h != "none")
    bad = set(names) - set(HEURISTICS)
    if bad:
        raise argparse.ArgumentTypeError(f"unknown heuristics {sorted(bad)}")
    return tuple(h for h in HEURISTICS if h in names)


def _policy(path) -> InflationPolicy | None:
    if path is None:
        return None
    try:
        return InflationPolicy.from_json(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise TopologyError(f"{path}: bad epsilon policy: {exc}") from exc


def _buckets(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad bucket edges {text!r}") from exc


def _pi(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad permutation {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--topology", default="builtin:l5",
                        help="GraphML file, metric JSON, or builtin:l5|square|star")
    common.add_argument("--counties", help="population CSV (name,latitude,longitude,population)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--connections", type=int, default=10_000)
    common.add_argument("--moves", type=int, default=1_000)
    common.add_argument("--lt", type=float, default=2.0, help="leaf latency threshold, ms")
    common.add_argument("--alpha", type=float, default=2.0)
    common.add_argument("--pi", type=_pi, help="comma list fixing the HCS site order")
    common.add_argument("--heuristics", type=_heuristics, default=HEURISTICS,
                        help="comma list from centers,detours,shortcuts (or none)")
    common.add_argument("--epsilon-policy", help="JSON list of {lo, hi, eps} ranges")
    common.add_argument("--buckets", type=_buckets, default=DEFAULT_BUCKET_EDGES,
                        help="comma list of latency bucket edges, ms")

    p = argparse.ArgumentParser(prog="llptree", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("build", parents=[common], help="build a tree and write tree.json")
    sub.add_parser("inflate", parents=[common], help="connection setup inflation experiment")
    sub.add_parser("memory", parents=[common], help="mapping entries per gip")
    sub.add_parser("update", parents=[common], help="mobility update disruption")
    sub.add_parser("all", parents=[common], help="run every experiment")
    v = sub.add_parser("validate", parents=[common], help="check invariants of a tree.json")
    v.add_argument("tree", help="tree JSON written by build")
    f = sub.add_parser("fixtures", help="export Topology Zoo and population fixtures")
    f.add_argument("dir")
    return p


def _config(args) -> ExperimentConfig:
    return ExperimentConfig(lt=args.lt, alpha=args.alpha, seed=args.seed,
                            heuristics=tuple(args.heuristics), policy=_policy(args.epsilon_policy),
                            connections=args.connections, moves=args.moves,
                            bucket_edges=tuple(args.buckets), pi=args.pi)


def _weighted(args):
    graph, name = load_metric(args.topology)
    if args.counties:
        counties, skipped = load_population(args.counties)
        if skipped:
            log.info("%s: skipped %d unusable rows", args.counties, skipped)
        counties = filter_counties(counties, graph) or counties
    else:
        counties = site_counties(graph)
    return assign_weights(graph, counties), counties, name


def cmd_build(args) -> int:
    graph, _, name = _weighted(args)
    tree = make_tree(graph, _config(args))
    violations = check_tree(tree, graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = tree.to_json(graph)
    doc["graph"] = graph.to_json()
    (out / "tree.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"{name}: {len(tree.nodes)} nodes, {len(tree.leaves())} leaves, height {tree.height}, "
          f"{len(tree.shortcut_list())} shortcuts -> {out / 'tree.json'}")
    if violations:
        raise InvariantError(violations)
    return EXIT_OK


def cmd_experiments(args, which) -> int:
    graph, counties, name = _weighted(args)
    inputs = [p for p in (args.topology, args.counties)
              if p and not p.startswith("builtin:")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    events = out / "events.jsonl" if "update" in which else None
    report = run_experiments(graph, counties, _config(args), which, name, inputs, events)
    for path in report.write(out, args.format):
        print(path)
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        doc = json.loads(Path(args.tree).read_text())
        tree = LlpTree.from_json(doc)
    except (OSError, ValueError, KeyError, TypeError, IndexError) as exc:
        raise TopologyError(f"{args.tree}: cannot read tree: {exc}") from exc
    graph = MetricGraph.from_json(doc["graph"]) if "graph" in doc else None
    if graph is None and args.topology:
        graph, _ = load_metric(args.topology)
    violations = check_tree(tree, graph)
    if graph is not None:
        violations += graph.check()
    if violations:
        raise InvariantError(violations)
    print(f"{args.tree}: ok ({len(tree.nodes)} nodes)")
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get("LLP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "build":
            return cmd_build(args)
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "fixtures":
            for name, path in export_all(args.dir).items():
                print(f"{name}: {path}")
            return EXIT_OK
        which = {"inflate": ("inflation",), "memory": ("memory",), "update": ("update",),
                 "all": ("inflation", "memory", "update")}[args.command]
        return cmd_experiments(args, which)
    except InvariantError as exc:
        for v in exc.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_INVARIANT
    except (TopologyError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
