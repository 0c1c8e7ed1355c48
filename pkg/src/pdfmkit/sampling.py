"""Seed-anchored breadth-first subgraph sampling.

For every seed node the sampler walks outward hop by hop.  At each
frontier node and for each edge set it draws up to ``fanout`` neighbours
without replacement, either uniformly or with probability proportional to
edge weight (exponential-race keys ``-ln(u) / w``, smallest keys win).
A node joins the subgraph at its first discovery hop only.

Sampled edges are stored in message direction: ``src`` is the drawn
neighbour, ``dst`` the frontier node that drew it.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import LookupFailure, ValidationError


@dataclass(frozen=True)
class SamplerConfig:
    max_hops: int = 4
    fanout: int | Mapping[str, int] = 8
    weighting: str = "edge_weight"
    seed: int = 0

    def __post_init__(self):
        if self.max_hops < 1:
            raise ValidationError("max_hops must be at least 1")
        if self.weighting not in ("uniform", "edge_weight"):
            raise ValidationError(f"unknown weighting mode {self.weighting!r}")
        fanouts = self.fanout.values() if isinstance(self.fanout, Mapping) else [self.fanout]
        if any(f < 1 for f in fanouts):
            raise ValidationError("fanouts must be at least 1")

    def fanout_for(self, edge_set):
        if isinstance(self.fanout, Mapping):
            return int(self.fanout.get(edge_set, 8))
        return int(self.fanout)


@dataclass(frozen=True)
class Subgraph:
    seed: str
    nodes: tuple
    hops: tuple
    edge_src: tuple = ()
    edge_dst: tuple = ()
    edge_set: tuple = ()
    # per edge set: positions (into ``nodes``) of the seed's in-neighbours
    seed_neighbors: dict = field(default_factory=dict)

    def hop_of(self):
        return dict(zip(self.nodes, self.hops))

    def edges(self):
        return list(zip(self.edge_src, self.edge_dst, self.edge_set))

    def to_json(self):
        return json.dumps({
            "seed": self.seed,
            "nodes": [{"id": n, "hop": h} for n, h in zip(self.nodes, self.hops)],
            "edges": [{"src": s, "dst": d, "edge_set": e} for s, d, e in self.edges()],
        }, indent=1)


def _rng_for(master_seed, node_id, draw=0):
    key = zlib.crc32(str(node_id).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), key, int(draw)]))


def _draw(indptr, dst, weight, frontier, fanout, weighted, rng):
    """Select up to ``fanout`` neighbours of every frontier node.

    Returns (frontier node, drawn neighbour) index arrays.
    """
    lo, hi = indptr[frontier], indptr[frontier + 1]
    deg = hi - lo
    if deg.sum() == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    owner = np.repeat(np.arange(len(frontier)), deg)
    pos = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)])
    nbr = dst[pos]
    u = rng.random(len(pos))
    if weighted:
        w = weight[pos]
        with np.errstate(divide="ignore"):
            keys = -np.log1p(-u) / w
        usable = w > 0
    else:
        keys = -np.log1p(-u)
        usable = np.ones(len(pos), bool)
    order = np.lexsort((keys, owner))
    start = np.concatenate([[0], np.cumsum(deg)[:-1]])
    rank = np.arange(len(order)) - start[owner[order]]
    keep = order[(rank < fanout) & usable[order]]
    keep.sort()
    return frontier[owner[keep]], nbr[keep]


def sample_subgraph(graph, seed_id, cfg: SamplerConfig = SamplerConfig(), draw=0):
    """Sample the neighbourhood of ``seed_id``.

    The random stream is derived from ``(cfg.seed, seed_id, draw)`` so every
    seed's subgraph is reproducible and independent of sampling order.
    """
    if not graph.has_node(seed_id):
        raise LookupFailure(f"unknown seed node {seed_id!r}")
    rng = _rng_for(cfg.seed, seed_id, draw)
    ids = graph.ids
    seed = graph.index(seed_id)
    hop = {seed: 0}
    frontier = np.array([seed], dtype=np.int64)
    e_src, e_dst, e_set = [], [], []
    weighted = cfg.weighting == "edge_weight"
    for h in range(cfg.max_hops):
        if len(frontier) == 0:
            break
        discovered = []
        for name in graph.edge_set_names:
            indptr, dst, w = graph.csr(name)
            owner, nbr = _draw(indptr, dst, w, frontier, cfg.fanout_for(name), weighted, rng)
            e_src.extend(nbr.tolist())
            e_dst.extend(owner.tolist())
            e_set.extend([name] * len(nbr))
            discovered.extend(nbr.tolist())
        new = []
        for v in discovered:
            if v not in hop:
                hop[v] = h + 1
                new.append(v)
        frontier = np.array(sorted(new, key=lambda i: ids[i]), dtype=np.int64)
    order = sorted(hop, key=lambda i: (hop[i], ids[i]))
    position = {v: p for p, v in enumerate(order)}
    seed_neighbors = {name: [] for name in graph.edge_set_names}
    for s, d, name in zip(e_src, e_dst, e_set):
        if d == seed:
            seed_neighbors[name].append(position[s])
    return Subgraph(
        seed=seed_id,
        nodes=tuple(ids[v] for v in order),
        hops=tuple(hop[v] for v in order),
        edge_src=tuple(ids[s] for s in e_src),
        edge_dst=tuple(ids[d] for d in e_dst),
        edge_set=tuple(e_set),
        seed_neighbors={k: tuple(v) for k, v in seed_neighbors.items()},
    )


def enumerate_seeds(graph):
    """Every node id once, in graph order."""
    return list(graph.ids)


def sample_all(graph, cfg: SamplerConfig = SamplerConfig(), draw=0, seeds=None):
    seeds = enumerate_seeds(graph) if seeds is None else seeds
    return [sample_subgraph(graph, s, cfg, draw) for s in seeds]
