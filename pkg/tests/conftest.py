import sys

import pytest

from llptree.experiments import filter_counties
from llptree.fixtures import ZOO_TOPOLOGIES, export_all
from llptree.topo import assign_weights, load_population, load_topology, metric_closure


@pytest.fixture(scope="session")
def zoo_dir(tmp_path_factory):
    """Topology Zoo GraphML files and a population CSV exported from packaged data."""
    out = tmp_path_factory.mktemp("zoo")
    export_all(out)
    return out


@pytest.fixture(scope="session")
def counties(zoo_dir):
    records, _ = load_population(zoo_dir / "us_population.csv")
    return records


@pytest.fixture(scope="session")
def zoo_graphs(zoo_dir, counties):
    graphs = {}
    for name in ZOO_TOPOLOGIES:
        topo = load_topology(zoo_dir / f"{name}.graphml")
        g = metric_closure(topo.sites, topo.edges)
        graphs[name] = assign_weights(g, filter_counties(counties, g) or counties)
    return graphs


@pytest.fixture(scope="session")
def arpanet(zoo_graphs):
    return zoo_graphs["Arpanet19728"]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
