"""Pipeline stages on disk.

Each stage writes its artifacts into ``<out>/<stage>/`` together with a
``manifest.json`` whose fingerprint hashes the config sections the stage
depends on plus the fingerprints of its inputs.  A stage refuses to run on
inputs whose manifest does not match the current config, naming the
upstream stage to rerun.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import bench, features, forecast, pdfm, synthgeo, worldio
from .config import RunConfig
from .errors import StaleArtifactError
from .graph import build_graph, export_graph, import_graph

logger = logging.getLogger(__name__)

STAGES = ("synth", "build-graph", "train", "embed", "eval", "forecast", "report")
DIRS = {"synth": "world", "build-graph": "graph", "train": "model", "embed": "embeddings",
        "eval": "eval", "forecast": "forecast", "report": "report"}
UPSTREAM = {"synth": (), "build-graph": ("synth",), "train": ("build-graph",),
            "embed": ("train",), "eval": ("embed",), "forecast": ("embed",),
            "report": ("eval", "forecast")}
SECTIONS = {"synth": ("synth",), "build-graph": ("graph",), "train": ("sampler", "model"),
            "embed": ("bench",), "eval": ("regressors", "splits", "bench"),
            "forecast": ("forecast",), "report": ("bench",)}


def _h(*parts):
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def stage_fingerprint(cfg: RunConfig, stage):
    ups = [stage_fingerprint(cfg, u) for u in UPSTREAM[stage]]
    return _h(stage, cfg.fingerprint(*SECTIONS[stage]), *ups)


def stage_dir(out, stage):
    return Path(out) / DIRS[stage]


def read_manifest(out, stage):
    path = stage_dir(out, stage) / "manifest.json"
    if not path.exists():
        return None
    return json.loads(path.read_text())


def is_current(cfg, out, stage):
    m = read_manifest(out, stage)
    return m is not None and m.get("fingerprint") == stage_fingerprint(cfg, stage)


def require_upstream(cfg, out, stage):
    for up in UPSTREAM[stage]:
        if not is_current(cfg, out, up):
            m = read_manifest(out, up)
            why = "missing" if m is None else "built from a different config"
            raise StaleArtifactError(up, f"{up} artifacts are {why}; rerun '{up}' before '{stage}'")


def _write_manifest(cfg, out, stage, files, extra=None):
    d = stage_dir(out, stage)
    doc = {"stage": stage, "fingerprint": stage_fingerprint(cfg, stage),
           "files": sorted(str(Path(f).relative_to(d)) for f in files)}
    doc.update(extra or {})
    (d / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------

def prepared_blocks(world, sources):
    """Impute, standardize (fit over all regions) and clip every block."""
    out, stats = {}, {}
    for s in sources:
        block = features.impute_column_means(world.blocks[s])
        st = features.fit_standardizer(block)
        out[s] = features.apply_standardizer(block, st)
        stats[s] = {"mean": st.mean.tolist(), "std": st.std.tolist(), "clip": st.clip}
    return out, stats


def load_graph(cfg, out):
    world = worldio.read_world(stage_dir(out, "synth"))
    blocks, _ = prepared_blocks(world, list(cfg.synth.block_dims))
    return world, import_graph(stage_dir(out, "build-graph"), blocks)


def run_synth(cfg: RunConfig, out):
    world = synthgeo.generate_world(cfg.synth_config())
    files = worldio.write_world(world, stage_dir(out, "synth"))
    _write_manifest(cfg, out, "synth", files + [stage_dir(out, "synth") / "series.json"])
    return files


def run_build_graph(cfg: RunConfig, out):
    require_upstream(cfg, out, "build-graph")
    world = worldio.read_world(stage_dir(out, "synth"))
    blocks, stats = prepared_blocks(world, list(cfg.synth.block_dims))
    graph = build_graph(world.regions, blocks, cfg.graph_config())
    d = stage_dir(out, "build-graph")
    export_graph(graph, d)
    (d / "standardization.json").write_text(json.dumps(stats, sort_keys=True) + "\n")
    counts = {n: len(e) for n, e in graph.edge_sets.items()}
    _write_manifest(cfg, out, "build-graph", list(d.glob("*.csv")) + [d / "graph.json", d / "standardization.json"],
                    {"edge_counts": counts})
    return graph


def run_train(cfg: RunConfig, out):
    require_upstream(cfg, out, "train")
    _, graph = load_graph(cfg, out)
    t0 = time.perf_counter()
    result = pdfm.train_pdfm(graph, cfg.pdfm_config(), cfg.sampler_config())
    logger.info("trained in %.1fs", time.perf_counter() - t0)
    d = stage_dir(out, "train")
    d.mkdir(parents=True, exist_ok=True)
    pdfm.save_model(result.model, d / "weights.json")
    (d / "history.json").write_text(json.dumps(result.history, indent=1) + "\n")
    _write_manifest(cfg, out, "train", [d / "weights.json", d / "history.json"])
    return result


def run_embed(cfg: RunConfig, out):
    require_upstream(cfg, out, "embed")
    world, graph = load_graph(cfg, out)
    model = pdfm.load_model(stage_dir(out, "train") / "weights.json")
    table = pdfm.export_embeddings(model, graph, cfg.embed_sampler_config())
    d = stage_dir(out, "embed")
    d.mkdir(parents=True, exist_ok=True)
    pdfm.write_embeddings_csv(table, d / "embeddings.csv")
    files = [d / "embeddings.csv"]
    meta = {"partitions": {k: list(v) for k, v in table.partitions.items()},
            "aliases": table.aliases, "table_fingerprint": table.fingerprint}
    if cfg.bench.external_width:
        ids, values = synthgeo.coordinate_embedding(graph.nodes, cfg.bench.external_width, cfg.seed)
        ext = pdfm.EmbeddingTable(tuple(ids), values, {"external": (0, values.shape[1])})
        pdfm.write_embeddings_csv(ext, d / "external.csv")
        files.append(d / "external.csv")
    (d / "embeddings.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    _write_manifest(cfg, out, "embed", files + [d / "embeddings.json"])
    return table


def load_embeddings(out):
    d = stage_dir(out, "embed")
    meta = json.loads((d / "embeddings.json").read_text())
    parts = {k: tuple(v) for k, v in meta["partitions"].items()}
    table = pdfm.read_embeddings_csv(d / "embeddings.csv", parts, meta["aliases"], meta["table_fingerprint"])
    ext = None
    if (d / "external.csv").exists():
        ext = pdfm.read_embeddings_csv(d / "external.csv", fingerprint="external")
    return table, ext


def bench_inputs(cfg: RunConfig, world, table, external=None):
    """Tables, splits and label store for the three region-holdout tasks."""
    p2c = bench.map_postal_to_county(world.regions)
    by_id = {r.id: r for r in world.regions}
    p2s = {p: by_id[p].state for p in p2c}
    sp = cfg.splits
    interp = bench.make_interpolation_split(p2c, sp.holdout_fraction, cfg.seed, sp.validation_fraction)
    extrap = bench.make_extrapolation_split(p2s, sp.holdout_fraction, cfg.seed, sp.validation_fraction)
    county_labels = set.intersection(*(set(v) for v in world.labels.values())) if world.labels else set()
    superres = bench.make_superres_split(interp, p2c, sp.validation_fraction, county_labels)
    tables = {"pdfm": table}
    if cfg.bench.modality_slices:
        for group in sorted(table.partitions):
            tables[f"pdfm[{group}]"] = pdfm.slice_modality(table, group)
    if external is not None:
        tables["external"] = external
        tables["pdfm+external"] = pdfm.concat_external(table, external)
    coords = {r.id: (r.lat, r.lon) for r in world.regions}
    return bench.BenchInputs(world.labels, coords, tables, p2c,
                             {"interpolation": interp, "extrapolation": extrap, "superres": superres},
                             cfg.regressor_specs())


def bench_methods(cfg, tables):
    methods = [bench.MethodSpec("idw", "coords", "idw")]
    for name in tables:
        for fam in cfg.bench.families:
            methods.append(bench.MethodSpec(f"{name}_{fam}", name, fam))
    return methods


def run_eval(cfg: RunConfig, out, workers=1):
    require_upstream(cfg, out, "eval")
    world = worldio.read_world(stage_dir(out, "synth"))
    table, ext = load_embeddings(out)
    inputs = bench_inputs(cfg, world, table, ext)
    tasks = cfg.bench.tasks or sorted(world.labels)
    report = bench.run_benchmark(inputs, tasks, bench_methods(cfg, inputs.tables), workers=workers)
    d = stage_dir(out, "eval")
    d.mkdir(parents=True, exist_ok=True)
    (d / "results.json").write_text(report.to_json())
    (d / "splits.json").write_text(json.dumps(
        {k: v.manifest() for k, v in inputs.splits.items()}, sort_keys=True, indent=1) + "\n")
    bench.write_predictions_csv(report, inputs, d / "predictions.csv")
    _write_manifest(cfg, out, "eval", [d / "results.json", d / "splits.json", d / "predictions.csv"])
    return report


def run_forecast(cfg: RunConfig, out):
    require_upstream(cfg, out, "forecast")
    world = worldio.read_world(stage_dir(out, "synth"))
    table, _ = load_embeddings(out)
    tasks = [t for t in cfg.forecast.tasks if t in world.series]
    sections = {}
    for task in tasks:
        tcfg = cfg.forecast.tasks[task]
        panel = world.series[task]
        split = forecast.ThreePartSplit.from_lengths(panel.n_steps, tcfg.part2, tcfg.part3)
        external = forecast.read_external_forecasts(tcfg.external_forecasts) if tcfg.external_forecasts else None
        res = forecast.run_forecast_benchmark(
            panel, split, table, cfg.forecaster_spec(task, panel.period), tuple(tcfg.arima_order),
            cfg.adapter_config(), m_comparisons=len(tasks), external=external)
        res.pop("forecasts")
        sections[task] = res
    d = stage_dir(out, "forecast")
    d.mkdir(parents=True, exist_ok=True)
    (d / "forecast.json").write_text(json.dumps(bench._clean(sections), sort_keys=True, indent=2) + "\n")
    _write_manifest(cfg, out, "forecast", [d / "forecast.json"])
    return sections


def run_report(cfg: RunConfig, out):
    require_upstream(cfg, out, "report")
    ev = json.loads((stage_dir(out, "eval") / "results.json").read_text())
    fc = json.loads((stage_dir(out, "forecast") / "forecast.json").read_text())
    for section in fc.values():
        section.pop("region_ape", None)
        section.pop("region_ids", None)
    report = bench.EvalReport(ev["results"], ev["significance"], ev["splits"], ev["fingerprints"],
                              forecast=fc)
    d = stage_dir(out, "report")
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(report.to_json())
    csv_text = report.to_csv()
    lines = [csv_text.rstrip("\n")]
    for task in sorted(fc):
        for method in sorted(fc[task]["methods"]):
            lines.append(f"{task},{method},forecast,mape,{float(fc[task]['methods'][method]['mape'])!r}")
    (d / "report.csv").write_text("\n".join(lines) + "\n")
    files = [d / "report.json", d / "report.csv"]
    if cfg.bench.svg_maps:
        files += _render_maps(out, d)
    _write_manifest(cfg, out, "report", files)
    return report


def _render_maps(out, d):
    world = worldio.read_world(stage_dir(out, "synth"))
    coords = {r.id: (r.lat, r.lon) for r in world.regions}
    preds = {}
    with open(stage_dir(out, "eval") / "predictions.csv") as fh:
        next(fh)
        for line in fh:
            rid, task, method, split, _, v = line.rstrip("\n").split(",")
            if split == "interpolation":
                preds.setdefault((task, method), []).append((rid, float(v)))
    files = []
    for (task, method), rows in sorted(preds.items()):
        xy = np.array([coords[r] for r, _ in rows])
        svg = bench.render_choropleth_svg(xy, [v for _, v in rows], f"{task} / {method}")
        path = d / f"map_{task}_{method}.svg".replace("[", "_").replace("]", "_").replace("+", "_")
        path.write_text(svg)
        files.append(path)
    return files


RUNNERS = {"synth": run_synth, "build-graph": run_build_graph, "train": run_train,
           "embed": run_embed, "eval": run_eval, "forecast": run_forecast, "report": run_report}


def run_stage(cfg, out, stage, resume=False, workers=1):
    if resume and is_current(cfg, out, stage):
        logger.info("%s: up to date, skipped", stage)
        return None
    if stage == "eval":
        return run_eval(cfg, out, workers)
    return RUNNERS[stage](cfg, out)


def run_pipeline(cfg, out, resume=False, workers=1, progress=None):
    for stage in STAGES:
        t0 = time.perf_counter()
        run_stage(cfg, out, stage, resume, workers)
        if progress is not None:
            progress(f"{stage}: done in {time.perf_counter() - t0:.1f}s")
