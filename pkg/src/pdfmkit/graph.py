"""Region graph: postal-code and county nodes joined by typed edge sets.

Three edge families are built:

* proximity edges between same-kind regions whose centroids are close,
* containment edges between a postal code and its county,
* similarity edges between same-kind regions with similar feature rows.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AssemblyError, ReferentialIntegrityError, ValidationError
from .features import FeatureBlock

logger = logging.getLogger(__name__)

EARTH_RADIUS_MILES = 3958.761
EDGE_SET_NAMES = ("prox_postal", "prox_county", "containment", "similarity")
SYMMETRIC_SETS = ("prox_postal", "prox_county", "similarity")


@dataclass(frozen=True)
class Region:
    id: str
    kind: str
    lat: float
    lon: float
    state: str
    county: str | None = None
    overlap_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("postal", "county"):
            raise ValidationError(f"{self.id}: kind must be postal or county")
        _check_latlon(self.lat, self.lon)
        if self.kind == "postal" and not self.county:
            raise ValidationError(f"{self.id}: postal region needs a parent county")
        if self.kind == "county" and self.county:
            raise ValidationError(f"{self.id}: county region cannot have a parent county")
        if not 0.0 <= self.overlap_weight <= 1.0:
            raise ValidationError(f"{self.id}: overlap weight outside [0, 1]")


@dataclass(frozen=True)
class EdgeSet:
    """Directed weighted pairs; ``src``/``dst`` hold region ids."""

    name: str
    src: tuple = ()
    dst: tuple = ()
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.name not in EDGE_SET_NAMES:
            raise ValidationError(f"unknown edge set {self.name!r}")
        w = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        if not (len(self.src) == len(self.dst) == len(w)):
            raise ValidationError(f"{self.name}: ragged edge arrays")
        if np.any(w < 0):
            raise ValidationError(f"{self.name}: negative edge weight")
        object.__setattr__(self, "src", tuple(self.src))
        object.__setattr__(self, "dst", tuple(self.dst))
        object.__setattr__(self, "weight", w)

    def __len__(self):
        return len(self.src)

    def pairs(self):
        return set(zip(self.src, self.dst))

    @classmethod
    def from_pairs(cls, name, pairs: Mapping[tuple, float]):
        """Build from ``{(src, dst): weight}`` with a sorted, stable edge order."""
        keys = sorted(pairs)
        return cls(name, tuple(k[0] for k in keys), tuple(k[1] for k in keys),
                   np.array([pairs[k] for k in keys], dtype=np.float64))


@dataclass(frozen=True)
class GraphConfig:
    proximity_radius_miles: float = 100.0
    proximity_degree_cap: int = 64
    similarity_k: int = 10
    similarity_source: str = "trends"

    def __post_init__(self):
        if not self.proximity_radius_miles > 0:
            raise ValidationError("proximity_radius_miles must be positive")
        if self.proximity_degree_cap < 1 or self.similarity_k < 1:
            raise ValidationError("degree caps must be at least 1")


def _check_latlon(lat, lon):
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if np.any(~np.isfinite(lat)) or np.any(np.abs(lat) > 90):
        raise ValidationError("latitude outside [-90, 90]")
    if np.any(~np.isfinite(lon)) or np.any(np.abs(lon) > 180):
        raise ValidationError("longitude outside [-180, 180]")


def geodesic_distance_miles(a, b):
    """Haversine great-circle distance in miles.

    ``a`` and ``b`` are ``(lat, lon)`` pairs in degrees, or arrays whose
    last axis holds them; broadcasting applies.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_latlon(a[..., 0], a[..., 1])
    _check_latlon(b[..., 0], b[..., 1])
    lat1, lon1 = np.radians(a[..., 0]), np.radians(a[..., 1])
    lat2, lon2 = np.radians(b[..., 0]), np.radians(b[..., 1])
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    d = 2 * EARTH_RADIUS_MILES * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if d.ndim == 0 else d


def pairwise_distance_miles(coords_a, coords_b):
    coords_a = np.asarray(coords_a, dtype=np.float64).reshape(-1, 2)
    coords_b = np.asarray(coords_b, dtype=np.float64).reshape(-1, 2)
    return geodesic_distance_miles(coords_a[:, None, :], coords_b[None, :, :])


def _proximity_for_kind(nodes, cfg):
    pairs = {}
    if len(nodes) < 2:
        return pairs
    coords = np.array([(n.lat, n.lon) for n in nodes])
    ids = [n.id for n in nodes]
    dist = pairwise_distance_miles(coords, coords)
    np.fill_diagonal(dist, np.inf)
    id_rank = np.argsort(np.argsort(np.array(ids, dtype=object)))
    for i in range(len(nodes)):
        cand = np.nonzero(dist[i] <= cfg.proximity_radius_miles)[0]
        if len(cand) > cfg.proximity_degree_cap:
            # nearest first; equal distances fall back to id order
            order = np.lexsort((id_rank[cand], dist[i, cand]))
            cand = cand[order[: cfg.proximity_degree_cap]]
        for j in cand:
            w = 1.0 / (1.0 + dist[i, j])
            pairs[(ids[i], ids[j])] = w
            pairs[(ids[j], ids[i])] = w
    return pairs


def build_proximity_edges(nodes: Sequence[Region], cfg: GraphConfig = GraphConfig()):
    """Same-kind edges within ``cfg.proximity_radius_miles``.

    Each node keeps at most ``proximity_degree_cap`` nearest partners; the
    kept pairs are then symmetrized by union, so a node's final degree can
    exceed the cap when others chose it.
    """
    if not nodes:
        raise ValidationError("no nodes to connect")
    postal = [n for n in nodes if n.kind == "postal"]
    county = [n for n in nodes if n.kind == "county"]
    return (EdgeSet.from_pairs("prox_postal", _proximity_for_kind(postal, cfg)),
            EdgeSet.from_pairs("prox_county", _proximity_for_kind(county, cfg)))


def build_containment_edges(nodes: Sequence[Region]):
    counties = {n.id for n in nodes if n.kind == "county"}
    pairs = {}
    for n in nodes:
        if n.kind != "postal":
            continue
        if n.county not in counties:
            raise ReferentialIntegrityError(
                f"postal {n.id} references unknown county {n.county!r}")
        pairs[(n.id, n.county)] = n.overlap_weight
        pairs[(n.county, n.id)] = n.overlap_weight
    return EdgeSet.from_pairs("containment", pairs)


def build_similarity_edges(block: FeatureBlock, k: int = 10, kinds: Mapping[str, str] | None = None):
    """k most cosine-similar same-kind neighbours per node, symmetrized.

    ``kinds`` maps region id to kind; when omitted every row is treated as
    the same kind.  Rows with zero norm take no part in either direction.
    """
    if k < 1:
        raise ValidationError("similarity k must be at least 1")
    ids = list(block.ids)
    kinds = kinds or {}
    norms = np.linalg.norm(block.values, axis=1)
    zero = norms == 0
    for rid in np.array(ids, dtype=object)[zero]:
        logger.info("similarity: region %s has a zero feature row; skipped", rid)
    pairs = {}
    groups = {}
    for i, rid in enumerate(ids):
        if not zero[i]:
            groups.setdefault(kinds.get(rid, "all"), []).append(i)
    for members in groups.values():
        members = sorted(members, key=lambda i: ids[i])
        if len(members) < 2:
            continue
        m = np.array(members)
        unit = block.values[m] / norms[m][:, None]
        sim = unit @ unit.T
        # members are id-sorted, so a stable sort on -sim breaks ties by id
        np.fill_diagonal(sim, -np.inf)
        order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        for a in range(len(m)):
            for b in order[a]:
                if b == a:
                    continue
                w = float(np.clip(sim[a, b], 0.0, 1.0))
                u, v = ids[m[a]], ids[m[b]]
                pairs[(u, v)] = w
                pairs[(v, u)] = w
    return EdgeSet.from_pairs("similarity", pairs)


class RegionGraph:
    """Immutable, indexed region graph.

    Adjacency is stored per edge set in CSR form over integer node
    positions; :meth:`neighbors` answers in O(degree).
    """

    def __init__(self, nodes, edge_sets, blocks):
        self._nodes = tuple(nodes)
        self._ids = tuple(n.id for n in self._nodes)
        self._index = {rid: i for i, rid in enumerate(self._ids)}
        self._edge_sets = dict(edge_sets)
        self._blocks = dict(blocks)
        self._csr = {}
        for name, es in self._edge_sets.items():
            n = len(self._ids)
            src = np.fromiter((self._index[s] for s in es.src), dtype=np.int64, count=len(es))
            dst = np.fromiter((self._index[d] for d in es.dst), dtype=np.int64, count=len(es))
            order = np.lexsort((dst, src))
            src, dst, w = src[order], dst[order], es.weight[order]
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.add.at(indptr, src + 1, 1)
            indptr = np.cumsum(indptr)
            for arr in (indptr, dst, w):
                arr.setflags(write=False)
            self._csr[name] = (indptr, dst, w)

    @property
    def nodes(self):
        return self._nodes

    @property
    def ids(self):
        return self._ids

    @property
    def edge_sets(self):
        return dict(self._edge_sets)

    @property
    def edge_set_names(self):
        return tuple(self._edge_sets)

    @property
    def blocks(self):
        return dict(self._blocks)

    def __len__(self):
        return len(self._ids)

    def index(self, rid):
        return self._index[rid]

    def has_node(self, rid):
        return rid in self._index

    def csr(self, edge_set):
        return self._csr[edge_set]

    def neighbors(self, rid, edge_set):
        """(neighbor ids, weights) of ``rid`` in ``edge_set``."""
        indptr, dst, w = self._csr[edge_set]
        i = self._index[rid]
        lo, hi = indptr[i], indptr[i + 1]
        return [self._ids[j] for j in dst[lo:hi]], w[lo:hi]

    def feature_matrix(self, sources=None):
        from .features import concat_blocks

        sources = sources or list(self._blocks)
        return concat_blocks([self._blocks[s] for s in sources])


def assemble_graph(nodes: Sequence[Region], edge_sets: Iterable[EdgeSet],
                   blocks: Mapping[str, FeatureBlock]):
    """Validate components and return an immutable :class:`RegionGraph`.

    Feature blocks are re-ordered to match ``nodes``.
    """
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise AssemblyError("duplicate region ids")
    known = set(ids)
    kind = {n.id: n.kind for n in nodes}
    counties = {n.id for n in nodes if n.kind == "county"}
    for n in nodes:
        if n.kind == "postal" and n.county not in counties:
            raise AssemblyError(f"node {n.id}: parent county {n.county!r} missing")
    sets = {}
    for es in edge_sets:
        if es.name in sets:
            raise AssemblyError(f"edge set {es.name} given twice")
        for s, d in zip(es.src, es.dst):
            if s not in known or d not in known:
                raise AssemblyError(f"edge set {es.name}: edge {s}->{d} has unknown endpoint")
            if s == d:
                raise AssemblyError(f"edge set {es.name}: self-loop at {s}")
            if es.name == "containment" and {kind[s], kind[d]} != {"postal", "county"}:
                raise AssemblyError(f"containment edge {s}->{d} is not postal<->county")
            if (es.name == "prox_postal" and kind[s] != "postal") or \
                    (es.name == "prox_county" and kind[s] != "county"):
                raise AssemblyError(f"edge set {es.name}: edge {s}->{d} has wrong node kind")
        if es.name in SYMMETRIC_SETS:
            pairs = es.pairs()
            for s, d in pairs:
                if (d, s) not in pairs:
                    raise AssemblyError(f"edge set {es.name}: {s}->{d} lacks reverse edge")
        sets[es.name] = es
    for name in EDGE_SET_NAMES:
        sets.setdefault(name, EdgeSet(name))
    ordered = {}
    for source, block in blocks.items():
        index = block.row_index()
        missing = [rid for rid in ids if rid not in index]
        if missing:
            raise AssemblyError(f"block {source}: no feature row for node {missing[0]}")
        ordered[source] = block.take(ids)
    return RegionGraph(nodes, {n: sets[n] for n in EDGE_SET_NAMES}, ordered)


def build_graph(nodes, blocks, cfg: GraphConfig = GraphConfig()):
    """Build all edge families and assemble the graph."""
    prox_postal, prox_county = build_proximity_edges(nodes, cfg)
    containment = build_containment_edges(nodes)
    kinds = {n.id: n.kind for n in nodes}
    similarity = EdgeSet("similarity")
    if cfg.similarity_source in blocks:
        similarity = build_similarity_edges(blocks[cfg.similarity_source], cfg.similarity_k, kinds)
    else:
        logger.warning("similarity source %s not attached; no similarity edges",
                       cfg.similarity_source)
    return assemble_graph(nodes, [prox_postal, prox_county, containment, similarity], blocks)


def export_graph(graph: RegionGraph, directory):
    """Write ``graph.json`` plus one ``edges_<set>.csv`` per edge set."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": 1,
        "nodes": [
            {"id": n.id, "kind": n.kind, "lat": n.lat, "lon": n.lon, "state": n.state,
             "county": n.county, "overlap_weight": n.overlap_weight}
            for n in graph.nodes
        ],
        "edge_sets": {name: len(es) for name, es in graph.edge_sets.items()},
        "blocks": {s: list(b.columns) for s, b in graph.blocks.items()},
    }
    (directory / "graph.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    for name, es in graph.edge_sets.items():
        with open(directory / f"edges_{name}.csv", "w", newline="\n") as fh:
            fh.write("src,dst,weight\n")
            for s, d, w in zip(es.src, es.dst, es.weight):
                fh.write(f"{s},{d},{float(w)!r}\n")


def import_graph(directory, blocks: Mapping[str, FeatureBlock]):
    directory = Path(directory)
    manifest = json.loads((directory / "graph.json").read_text())
    nodes = [Region(n["id"], n["kind"], n["lat"], n["lon"], n["state"], n["county"],
                    n["overlap_weight"]) for n in manifest["nodes"]]
    sets = []
    for name in manifest["edge_sets"]:
        src, dst, w = [], [], []
        with open(directory / f"edges_{name}.csv") as fh:
            next(fh)
            for line in fh:
                s, d, x = line.rstrip("\n").split(",")
                src.append(s)
                dst.append(d)
                w.append(float(x))
        sets.append(EdgeSet(name, tuple(src), tuple(dst), np.array(w)))
    return assemble_graph(nodes, sets, blocks)

