import numpy as np
import pytest

from pdfmkit import features, graph, pdfm, synthgeo


def standardized_blocks(world):
    out = {}
    for source, block in world.blocks().items():
        out[source] = features.apply_standardizer(block, features.fit_standardizer(block))
    return out


@pytest.fixture(scope="session")
def desk_world():
    return synthgeo.generate_world(synthgeo.SynthConfig())


@pytest.fixture(scope="session")
def desk_graph(desk_world):
    return graph.build_graph(desk_world.regions, standardized_blocks(desk_world))


@pytest.fixture(scope="session")
def desk_training(desk_graph):
    """30 epochs of self-supervised training on the desk world (~20 s)."""
    return pdfm.train_pdfm(desk_graph, pdfm.PdfmConfig(epochs=30))


@pytest.fixture(scope="session")
def desk_embeddings(desk_training, desk_graph):
    return pdfm.export_embeddings(desk_training.model, desk_graph)


def line_regions(n, spacing_miles, kind="postal", prefix="n"):
    """Regions on the equator ``spacing_miles`` apart, all in one county."""
    step = np.degrees(spacing_miles / graph.EARTH_RADIUS_MILES)
    regions = [graph.Region(f"{prefix}{i}", kind, 0.0, i * step, "S0",
                            "C0" if kind == "postal" else None) for i in range(n)]
    return regions


def custom_graph(edges_by_set, n_nodes, prefix="v"):
    """Graph over postal nodes ``v00..`` (plus one isolated county) with the
    given undirected weighted edges per edge set."""
    from pdfmkit.graph import EdgeSet, Region, assemble_graph

    ids = [f"{prefix}{i:02d}" for i in range(n_nodes)]
    nodes = [Region(rid, "postal", 0.0, 0.01 * i, "S0", "CX") for i, rid in enumerate(ids)]
    nodes.append(Region("CX", "county", 1.0, 1.0, "S0"))
    sets = []
    for name, edges in edges_by_set.items():
        pairs = {}
        for a, b, w in edges:
            pairs[(ids[a], ids[b])] = w
            pairs[(ids[b], ids[a])] = w
        sets.append(EdgeSet.from_pairs(name, pairs))
    return assemble_graph(nodes, sets, {})


def random_graph(seed, n_nodes=40, names=("prox_postal", "similarity")):
    rng = np.random.default_rng(seed)
    edges = {}
    for name in names:
        m = int(rng.integers(n_nodes // 2, 3 * n_nodes))
        lst = []
        for _ in range(m):
            a, b = rng.choice(n_nodes, 2, replace=False)
            lst.append((int(a), int(b), float(rng.choice([0.0, rng.uniform(0.01, 1.0)], p=[0.1, 0.9]))))
        edges[name] = lst
    return custom_graph(edges, n_nodes)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail=""):
    """One pass/fail line per acceptance criterion, echoed in the summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] AC{number:02d} {title}" + (f": {detail}" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
