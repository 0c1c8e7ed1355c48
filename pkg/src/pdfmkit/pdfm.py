"""Region-graph foundation model.

Architecture, per seed node ``v`` of a sampled subgraph:

    h0(u)  = GeLU(W_enc x(u) + b_enc)                 input encoder
    m_e    = sum_{u in N_e(v)} ReLU(W_e h0(u) + b_e)  pooled messages, per edge set
    h1(v)  = W_self h0(v) + b_self + sum_e m_e        one round of message passing
    emb(v) = W_emb h1(v) + b_emb                      partitioned embedding
    x_s(v) ~ W_dec,s emb(v)[part(s)] + b_dec,s        per-source linear decoders

Training reconstructs each seed's own standardized features with a Huber
loss summed over sources.  A decoder only ever receives the columns of its
partition, so each embedding slice is tied to one group of sources.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import nn
from .errors import ConfigError, JoinError, LookupFailure, ShapeError, TrainingError
from .sampling import SamplerConfig, enumerate_seeds, sample_subgraph

logger = logging.getLogger(__name__)

DEFAULT_SOURCES = ("trends", "maps", "busyness", "weather_aq")
SOURCE_GROUPS = {"trends": "trends", "maps": "maps_busyness",
                 "busyness": "maps_busyness", "weather_aq": "weather_aq"}
FULL_PARTITIONS = {"trends": (0, 128), "maps_busyness": (128, 256), "weather_aq": (256, 330)}
DESK_PARTITIONS = {"trends": (0, 16), "maps_busyness": (16, 32), "weather_aq": (32, 48)}
EDGE_SETS = ("prox_postal", "prox_county", "containment", "similarity")


@dataclass(frozen=True)
class PdfmConfig:
    input_widths: dict = field(default_factory=lambda: {
        "trends": 64, "maps": 64, "busyness": 32, "weather_aq": 45})
    hidden: int = 256
    embedding_dim: int = 48
    partitions: dict = field(default_factory=lambda: dict(DESK_PARTITIONS))
    source_groups: dict = field(default_factory=lambda: dict(SOURCE_GROUPS))
    edge_sets: tuple = EDGE_SETS
    rounds: int = 1
    pooling: str = "sum"
    share_edge_transforms: bool = False
    huber_delta: float = 1.0
    loss_weights: dict = field(default_factory=dict)
    lr_max: float = 2e-3
    lr_min: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.rounds != 1:
            raise ConfigError("rounds", "exactly one round of message passing is supported")
        if self.hidden < 1 or self.embedding_dim < 1:
            raise ConfigError("hidden", "layer widths must be positive")
        spans = sorted(self.partitions.values())
        cursor = 0
        for lo, hi in spans:
            if lo != cursor or hi <= lo:
                raise ConfigError("partitions", f"ranges {spans} must tile [0, {self.embedding_dim})")
            cursor = hi
        if cursor != self.embedding_dim:
            raise ConfigError("partitions", f"ranges end at {cursor}, expected {self.embedding_dim}")
        for source in self.input_widths:
            if self.source_groups.get(source) not in self.partitions:
                raise ConfigError("source_groups", f"source {source!r} has no partition")
        if self.pooling not in ("sum", "mean"):
            raise ConfigError("pooling", "must be 'sum' or 'mean'")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta", "must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction", "must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size", "batch size must be positive, epochs nonnegative")

    @property
    def sources(self):
        return tuple(self.input_widths)

    @property
    def input_width(self):
        return sum(self.input_widths.values())

    def column_ranges(self):
        out, start = {}, 0
        for s, w in self.input_widths.items():
            out[s] = (start, start + w)
            start += w
        return out

    def fingerprint(self):
        doc = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


def full_config(**overrides):
    widths = {"trends": 1000, "maps": 1192, "busyness": 1192, "weather_aq": 45}
    base = dict(input_widths=widths, hidden=256, embedding_dim=330,
                partitions=dict(FULL_PARTITIONS))
    base.update(overrides)
    return PdfmConfig(**base)


class PdfmModel:
    """Parameters live in one flat ``name -> array`` dict so the optimizer,
    checkpointing and gradient checks can treat them uniformly."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    def transform_key(self, edge_set):
        return "nbr.shared" if self.cfg.share_edge_transforms else f"nbr.{edge_set}"

    def layer(self, key, activation="identity"):
        return nn.DenseLayer(self.params[f"{key}.weight"], self.params[f"{key}.bias"], activation)

    def copy(self):
        return PdfmModel(self.cfg, {k: v.copy() for k, v in self.params.items()})


def init_model(cfg: PdfmConfig, rng=None):
    """Glorot-uniform weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    H, D = cfg.hidden, cfg.embedding_dim
    layers = [("enc", cfg.input_width, H)]
    keys = ["nbr.shared"] if cfg.share_edge_transforms else [f"nbr.{e}" for e in cfg.edge_sets]
    layers += [(k, H, H) for k in keys]
    layers += [("self", H, H), ("emb", H, D)]
    for s, w in cfg.input_widths.items():
        lo, hi = cfg.partitions[cfg.source_groups[s]]
        layers.append((f"dec.{s}", hi - lo, w))
    params = {}
    for key, n_in, n_out in layers:
        layer = nn.DenseLayer.glorot(n_in, n_out, rng=rng)
        params[f"{key}.weight"] = layer.weight
        params[f"{key}.bias"] = layer.bias
    return PdfmModel(cfg, params)


# ---------------------------------------------------------------------------
# batched forward / backward

@dataclass
class Batch:
    """Index structure for a mini-batch of subgraphs over a node matrix.

    ``rows`` are the node-matrix rows involved; ``seed_pos`` index into
    ``rows``; ``nbr[e] = (positions into rows, owning seed slot)``.
    """

    rows: np.ndarray
    seed_pos: np.ndarray
    nbr: dict


def make_batch(graph_index, subgraphs, edge_sets):
    """``graph_index`` maps region id to its row in the node feature matrix."""
    needed = {}

    def slot(rid):
        r = graph_index[rid]
        if r not in needed:
            needed[r] = len(needed)
        return needed[r]

    seed_pos = [slot(sg.seed) for sg in subgraphs]
    nbr = {}
    for e in edge_sets:
        pos, owner = [], []
        for b, sg in enumerate(subgraphs):
            for p in sg.seed_neighbors.get(e, ()):
                pos.append(slot(sg.nodes[p]))
                owner.append(b)
        nbr[e] = (np.array(pos, dtype=np.int64), np.array(owner, dtype=np.int64))
    rows = np.empty(len(needed), dtype=np.int64)
    for r, s in needed.items():
        rows[s] = r
    return Batch(rows, np.array(seed_pos, dtype=np.int64), nbr)


def encode_inputs(model, x):
    """Initial hidden states ``GeLU(W_enc x + b_enc)`` for feature rows ``x``."""
    if x.shape[-1] != model.cfg.input_width:
        raise ShapeError(f"feature width {x.shape[-1]} != model input width {model.cfg.input_width}")
    h0, _ = nn.dense_forward(model.layer("enc", "gelu"), x)
    return h0


def _pool(model, h0, batch, n_seeds, cache):
    p = model.params
    H = model.cfg.hidden
    total = np.zeros((n_seeds, H), dtype=h0.dtype)
    for e in model.cfg.edge_sets:
        pos, owner = batch.nbr.get(e, (np.zeros(0, np.int64), np.zeros(0, np.int64)))
        if len(pos) == 0:
            continue
        key = model.transform_key(e)
        z = h0[pos] @ p[f"{key}.weight"].T + p[f"{key}.bias"]
        a = np.maximum(z, 0.0)
        scale = None
        if model.cfg.pooling == "mean":
            counts = np.bincount(owner, minlength=n_seeds).astype(h0.dtype)
            scale = 1.0 / counts[owner]
            a = a * scale[:, None]
        np.add.at(total, owner, a)
        cache.append((e, key, pos, owner, z, scale))
    return total


def forward_batch(model, x, batch):
    """Embeddings and per-source reconstructions for every seed in ``batch``.

    ``x`` is the full node feature matrix; returns ``(emb, recon, cache)``.
    """
    p = model.params
    xb = x[batch.rows]
    z_enc = xb @ p["enc.weight"].T + p["enc.bias"]
    h0 = z_enc * ndtr(z_enc)
    n_seeds = len(batch.seed_pos)
    pool_cache = []
    pooled = _pool(model, h0, batch, n_seeds, pool_cache)
    h0_seed = h0[batch.seed_pos]
    h1 = h0_seed @ p["self.weight"].T + p["self.bias"] + pooled
    emb = h1 @ p["emb.weight"].T + p["emb.bias"]
    recon = {}
    for s in model.cfg.sources:
        lo, hi = model.cfg.partitions[model.cfg.source_groups[s]]
        recon[s] = emb[:, lo:hi] @ p[f"dec.{s}.weight"].T + p[f"dec.{s}.bias"]
    cache = dict(xb=xb, z_enc=z_enc, h0=h0, h1=h1, emb=emb, pool=pool_cache)
    return emb, recon, cache


def reconstruction_loss(model, x, batch, recon):
    """Weighted sum over sources of mean Huber loss, plus d loss / d recon."""
    cfg = model.cfg
    ranges = cfg.column_ranges()
    targets = x[batch.rows[batch.seed_pos]]
    total, grads = 0.0, {}
    for s in cfg.sources:
        lo, hi = ranges[s]
        w = cfg.loss_weights.get(s, 1.0)
        loss, g = nn.huber_loss(recon[s], targets[:, lo:hi], cfg.huber_delta)
        total += w * loss
        grads[s] = w * g
    return total, grads


def backward_batch(model, batch, cache, grad_recon):
    p = model.params
    cfg = model.cfg
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    emb, h1, h0 = cache["emb"], cache["h1"], cache["h0"]
    d_emb = np.zeros_like(emb)
    for s in cfg.sources:
        lo, hi = cfg.partitions[cfg.source_groups[s]]
        g = grad_recon[s]
        grads[f"dec.{s}.weight"] += g.T @ emb[:, lo:hi]
        grads[f"dec.{s}.bias"] += g.sum(axis=0)
        d_emb[:, lo:hi] += g @ p[f"dec.{s}.weight"]
    grads["emb.weight"] += d_emb.T @ h1
    grads["emb.bias"] += d_emb.sum(axis=0)
    d_h1 = d_emb @ p["emb.weight"]
    d_h0 = np.zeros_like(h0)
    grads["self.weight"] += d_h1.T @ h0[batch.seed_pos]
    grads["self.bias"] += d_h1.sum(axis=0)
    np.add.at(d_h0, batch.seed_pos, d_h1 @ p["self.weight"])
    for e, key, pos, owner, z, scale in cache["pool"]:
        d_a = d_h1[owner]
        if scale is not None:
            d_a = d_a * scale[:, None]
        d_z = d_a * (z > 0)
        grads[f"{key}.weight"] += d_z.T @ h0[pos]
        grads[f"{key}.bias"] += d_z.sum(axis=0)
        np.add.at(d_h0, pos, d_z @ p[f"{key}.weight"])
    d_zenc = d_h0 * nn.gelu_grad(cache["z_enc"])
    grads["enc.weight"] += d_zenc.T @ cache["xb"]
    grads["enc.bias"] += d_zenc.sum(axis=0)
    return grads


def loss_and_grads(model, x, batch):
    _, recon, cache = forward_batch(model, x, batch)
    loss, g = reconstruction_loss(model, x, batch, recon)
    return loss, backward_batch(model, batch, cache, g)


# ---------------------------------------------------------------------------
# single-subgraph views of the same computation

def sage_forward(model, subgraph, h0_by_node):
    """Seed state after one round of message passing.

    ``h0_by_node`` maps each subgraph node id to its initial state.
    """
    p = model.params
    h1 = p["self.weight"] @ h0_by_node[subgraph.seed] + p["self.bias"]
    for e in model.cfg.edge_sets:
        nbrs = subgraph.seed_neighbors.get(e, ())
        if not nbrs:
            continue
        key = model.transform_key(e)
        msgs = [np.maximum(p[f"{key}.weight"] @ h0_by_node[subgraph.nodes[i]] + p[f"{key}.bias"], 0.0)
                for i in nbrs]
        pooled = np.sum(msgs, axis=0)
        if model.cfg.pooling == "mean":
            pooled = pooled / len(msgs)
        h1 = h1 + pooled
    return h1


def embed_state(model, h1):
    return model.params["emb.weight"] @ h1 + model.params["emb.bias"]


def embed(model, subgraph, features):
    """Embedding of ``subgraph.seed``; ``features`` maps node id to its raw
    (standardized, concatenated) feature row."""
    ids = sorted({subgraph.seed, *[subgraph.nodes[i] for v in subgraph.seed_neighbors.values() for i in v]})
    h0 = encode_inputs(model, np.vstack([features[i] for i in ids]))
    return embed_state(model, sage_forward(model, subgraph, dict(zip(ids, h0))))


def reconstruct(model, emb):
    """Per-source reconstructions; each decoder sees only its partition."""
    out = {}
    for s in model.cfg.sources:
        lo, hi = model.cfg.partitions[model.cfg.source_groups[s]]
        out[s] = model.params[f"dec.{s}.weight"] @ emb[lo:hi] + model.params[f"dec.{s}.bias"]
    return out


# ---------------------------------------------------------------------------
# training

def split_seeds(seeds, fraction, rng):
    """Uniform train/validation split of the seed list (order preserved)."""
    n_val = int(round(fraction * len(seeds)))
    chosen = set(rng.choice(len(seeds), size=n_val, replace=False).tolist()) if n_val else set()
    train = [s for i, s in enumerate(seeds) if i not in chosen]
    val = [s for i, s in enumerate(seeds) if i in chosen]
    return train, val


@dataclass
class TrainResult:
    model: PdfmModel
    history: list
    train_seeds: list
    val_seeds: list


def node_matrix(graph, sources):
    x, _ = graph.feature_matrix(list(sources))
    return x, {rid: i for i, rid in enumerate(graph.ids)}


def evaluate_loss(model, x, index, subgraphs, batch_size=256):
    if not subgraphs:
        return float("nan")
    total = 0.0
    for i in range(0, len(subgraphs), batch_size):
        chunk = subgraphs[i:i + batch_size]
        batch = make_batch(index, chunk, model.cfg.edge_sets)
        _, recon, _ = forward_batch(model, x, batch)
        total += reconstruction_loss(model, x, batch, recon)[0] * len(chunk)
    return total / len(subgraphs)


def train_pdfm(graph, cfg: PdfmConfig, sampler_cfg: SamplerConfig = SamplerConfig(), model=None,
               log=None):
    """Self-supervised training on one subgraph per seed node.

    Seeds are split uniformly into train/validation; mini-batches of
    training subgraphs are optimized with Adam under a cosine-decayed
    learning rate.  ``history`` holds one record per epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    model = model if model is not None else init_model(cfg, np.random.default_rng(cfg.seed))
    x, index = node_matrix(graph, cfg.sources)
    seeds = enumerate_seeds(graph)
    train_ids, val_ids = split_seeds(seeds, cfg.validation_fraction, rng)
    history = []
    if cfg.epochs == 0:
        return TrainResult(model, history, train_ids, val_ids)
    sub = {s: sample_subgraph(graph, s, sampler_cfg) for s in seeds}
    train_sub = [sub[s] for s in train_ids]
    val_sub = [sub[s] for s in val_ids]
    steps_per_epoch = -(-len(train_sub) // cfg.batch_size)
    schedule = nn.CosineSchedule(cfg.lr_max, max(1, cfg.epochs * steps_per_epoch), cfg.lr_min)
    state = nn.AdamState()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_sub))
        running, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [train_sub[j] for j in order[i:i + cfg.batch_size]]
            batch = make_batch(index, chunk, cfg.edge_sets)
            loss, grads = loss_and_grads(model, x, batch)
            if not np.isfinite(loss):
                raise TrainingError("training loss diverged", step)
            lr = nn.cosine_lr(step, schedule)
            nn.adam_step(model.params, grads, state, lr)
            running += loss * len(chunk)
            seen += len(chunk)
            step += 1
        record = {"epoch": epoch, "train_loss": running / seen,
                  "val_loss": evaluate_loss(model, x, index, val_sub),
                  "lr": nn.cosine_lr(step, schedule)}
        history.append(record)
        logger.info("epoch %d train %.4f val %.4f", epoch, record["train_loss"], record["val_loss"])
        if log is not None:
            log(record)
    return TrainResult(model, history, train_ids, val_ids)


# ---------------------------------------------------------------------------
# embedding tables

@dataclass(frozen=True)
class EmbeddingTable:
    ids: tuple
    values: np.ndarray
    partitions: dict = field(default_factory=dict)
    aliases: dict = field(default_factory=dict)
    fingerprint: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != len(self.ids):
            raise ShapeError(f"embedding matrix {values.shape} does not match {len(self.ids)} ids")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "values", values)

    @property
    def width(self):
        return self.values.shape[1]

    def rows(self, ids):
        index = {rid: i for i, rid in enumerate(self.ids)}
        missing = [i for i in ids if i not in index]
        if missing:
            raise JoinError(f"{len(missing)} regions lack embeddings: {missing[:5]}", missing)
        return self.values[[index[i] for i in ids]]


def export_embeddings(model, graph, sampler_cfg: SamplerConfig = SamplerConfig(seed=12345),
                      batch_size=256):
    """One embedding per node, each from its own freshly sampled subgraph."""
    x, index = node_matrix(graph, model.cfg.sources)
    seeds = enumerate_seeds(graph)
    out = np.zeros((len(seeds), model.cfg.embedding_dim))
    for i in range(0, len(seeds), batch_size):
        chunk = [sample_subgraph(graph, s, sampler_cfg) for s in seeds[i:i + batch_size]]
        batch = make_batch(index, chunk, model.cfg.edge_sets)
        emb, _, _ = forward_batch(model, x, batch)
        out[i:i + len(chunk)] = emb
    aliases = {s: g for s, g in model.cfg.source_groups.items() if s in model.cfg.input_widths}
    digest = hashlib.sha256(out.tobytes()).hexdigest()[:16]
    return EmbeddingTable(tuple(seeds), out, dict(model.cfg.partitions), aliases,
                          f"{model.cfg.fingerprint()}:{digest}")


def slice_modality(table, modality):
    """Restrict ``table`` to one partition; ``modality`` is a partition name
    or a source name mapped onto its partition."""
    group = table.aliases.get(modality, modality)
    if group not in table.partitions:
        raise LookupFailure(f"unknown modality {modality!r}; have {sorted(table.partitions)}")
    lo, hi = table.partitions[group]
    return EmbeddingTable(table.ids, table.values[:, lo:hi], {group: (0, hi - lo)},
                          {}, f"{table.fingerprint}[{group}]")


def concat_external(table, external):
    """Append an external per-region embedding to every row."""
    if external.width == 0:
        return table
    missing = sorted(set(table.ids) - set(external.ids))
    extra = sorted(set(external.ids) - set(table.ids))
    if missing or extra:
        raise JoinError(f"id sets differ: {len(missing)} missing externally, {len(extra)} extra",
                        missing + extra)
    values = np.hstack([table.values, external.rows(table.ids)])
    parts = dict(table.partitions)
    parts["external"] = (table.width, table.width + external.width)
    return EmbeddingTable(table.ids, values, parts, dict(table.aliases),
                          f"{table.fingerprint}+{external.fingerprint}")


def save_model(model, path):
    nn.save_arrays(model.params, path, meta={"config": dataclasses.asdict(model.cfg)})


def load_model(path):
    arrays, meta = nn.load_arrays(path)
    cfg_doc = meta["config"]
    cfg_doc["edge_sets"] = tuple(cfg_doc["edge_sets"])
    cfg_doc["partitions"] = {k: tuple(v) for k, v in cfg_doc["partitions"].items()}
    return PdfmModel(PdfmConfig(**cfg_doc), arrays)


def write_embeddings_csv(table, path):
    with open(path, "w", newline="\n") as fh:
        fh.write("region_id," + ",".join(f"e_{j}" for j in range(table.width)) + "\n")
        for rid, row in zip(table.ids, table.values):
            fh.write(rid + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_embeddings_csv(path, partitions=None, aliases=None, fingerprint=""):
    ids, rows = [], []
    with open(path) as fh:
        header = next(fh).rstrip("\n").split(",")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    return EmbeddingTable(tuple(ids), values, partitions or {}, aliases or {}, fingerprint)
