"""Region-holdout splits and the benchmark harness.

Three tasks share one harness:

* interpolation: hold out whole counties, predict their postal codes;
* extrapolation: hold out whole states;
* super-resolution: train on county labels and county-level inputs only,
  predict the interpolation test postal codes.

Labels are only reachable through :class:`LabelView` objects, which refuse
ids outside the set a cell is allowed to read; the super-resolution cell
gets a county-only view for training.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines, downstream, metrics
from .errors import ConfigError, DataError, LeakageError, MappingError, PdfmError, ValidationError

logger = logging.getLogger(__name__)

TASK_KINDS = ("interpolation", "extrapolation", "superres")


# ---------------------------------------------------------------------------
# postal -> county mapping

def map_postal_to_county(overlaps):
    """Assign each postal code to the county with the largest overlap.

    ``overlaps`` is an iterable of ``(postal_id, county_id, weight)`` or of
    postal :class:`~pdfmkit.graph.Region` objects.  Zero-overlap rows are
    not candidates.  Ties go to the lexicographically smallest county id.
    """
    best = {}
    seen = set()
    for item in overlaps:
        if hasattr(item, "kind"):
            if item.kind != "postal":
                continue
            item = (item.id, item.county, item.overlap_weight)
        pid, cid, w = item
        seen.add(pid)
        if not w > 0:
            continue
        cur = best.get(pid)
        if cur is None or w > cur[1] or (w == cur[1] and cid < cur[0]):
            best[pid] = (cid, w)
    missing = sorted(seen - set(best))
    if missing:
        raise MappingError(f"{len(missing)} postal codes have no candidate county: {missing[:5]}")
    return {pid: cid for pid, (cid, _) in sorted(best.items())}


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class SplitSpec:
    kind: str
    train: tuple
    validation: tuple
    test: tuple
    holdout_groups: tuple
    fraction: float
    seed: int
    manifest_hash: str = ""

    def manifest(self):
        return {"kind": self.kind, "seed": self.seed, "fraction": self.fraction,
                "holdout_groups": list(self.holdout_groups), "train": list(self.train),
                "validation": list(self.validation), "test": list(self.test)}


def _finish(kind, train, val, test, groups, frac, seed):
    doc = {"kind": kind, "seed": seed, "fraction": frac, "holdout_groups": sorted(groups),
           "train": sorted(train), "validation": sorted(val), "test": sorted(test)}
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
    return SplitSpec(kind, tuple(doc["train"]), tuple(doc["validation"]), tuple(doc["test"]),
                     tuple(doc["holdout_groups"]), frac, seed, digest)


def _group_split(kind, postal_to_group, frac, seed, min_groups, val_fraction):
    if not 0.0 < frac < 1.0:
        raise ConfigError("holdout_fraction", f"must lie in (0, 1), got {frac}")
    groups = sorted(set(postal_to_group.values()))
    if len(groups) < min_groups:
        raise ValidationError(f"{kind} split needs at least {min_groups} groups, got {len(groups)}")
    rng = np.random.default_rng(seed)
    n_hold = int(math.floor(frac * len(groups)))
    held = {groups[i] for i in rng.choice(len(groups), size=n_hold, replace=False)}
    postal = sorted(postal_to_group)
    test = [p for p in postal if postal_to_group[p] in held]
    rest = [p for p in postal if postal_to_group[p] not in held]
    n_val = int(round(val_fraction * len(rest)))
    val_idx = set(rng.choice(len(rest), size=n_val, replace=False).tolist())
    train = [p for i, p in enumerate(rest) if i not in val_idx]
    val = [p for i, p in enumerate(rest) if i in val_idx]
    return _finish(kind, train, val, test, held, frac, seed)


def make_interpolation_split(postal_to_county, frac=0.2, seed=0, val_fraction=0.2):
    """Hold out ``floor(frac * n_counties)`` whole counties."""
    return _group_split("interpolation", postal_to_county, frac, seed, 5, val_fraction)


def make_extrapolation_split(postal_to_state, frac=0.2, seed=0, val_fraction=0.2):
    """Hold out ``floor(frac * n_states)`` whole states."""
    return _group_split("extrapolation", postal_to_state, frac, seed, 5, val_fraction)


def make_superres_split(interp: SplitSpec, postal_to_county, val_fraction=0.2, county_labels=None):
    """County rows of the interpolation training universe train the model;
    a fraction of interpolation-train postal codes validates; the test set
    is the interpolation test set."""
    if interp.kind != "interpolation":
        raise ValidationError("super-resolution is derived from an interpolation split")
    held = set(interp.holdout_groups)
    counties = sorted(set(postal_to_county.values()) - held)
    if county_labels is not None:
        missing = [c for c in counties if c not in county_labels]
        if missing:
            raise DataError(f"{len(missing)} training counties lack labels: {missing[:5]}")
    rng = np.random.default_rng([interp.seed, 1])
    pool = list(interp.train)
    n_val = int(round(val_fraction * len(pool)))
    val = sorted(pool[i] for i in rng.choice(len(pool), size=n_val, replace=False))
    return _finish("superres", counties, val, interp.test, held, interp.fraction, interp.seed)


# ---------------------------------------------------------------------------
# label access

class LabelView:
    """Read-only labels restricted to an allowed id set; records every read."""

    def __init__(self, labels, allowed, name=""):
        self._labels = labels
        self._allowed = frozenset(allowed)
        self.name = name
        self.accessed = set()

    def get(self, task, ids):
        bad = [i for i in ids if i not in self._allowed]
        if bad:
            raise LeakageError(f"view {self.name!r} may not read labels for {bad[:5]}")
        table = self._labels[task]
        missing = [i for i in ids if i not in table]
        if missing:
            raise DataError(f"task {task!r} lacks labels for {missing[:5]}")
        self.accessed.update(ids)
        return np.array([table[i] for i in ids], dtype=np.float64)


@dataclass(frozen=True)
class MethodSpec:
    """``features`` is ``"coords"`` or the name of an embedding table;
    ``regressor`` is ``"idw"`` or a downstream family."""

    name: str
    features: str
    regressor: str

    def __post_init__(self):
        if self.regressor not in ("idw",) + downstream.FAMILIES:
            raise ConfigError("regressor", f"unknown regressor {self.regressor!r}")
        if (self.regressor == "idw") != (self.features == "coords"):
            raise ConfigError("features", "IDW uses coordinates only; regressors use embeddings only")


def default_methods(table="pdfm"):
    return [MethodSpec("idw", "coords", "idw")] + [
        MethodSpec(f"{table}_{fam}", table, fam) for fam in downstream.FAMILIES]


@dataclass
class BenchInputs:
    labels: dict
    coords: dict
    tables: dict
    postal_to_county: dict
    splits: dict
    specs: dict = field(default_factory=lambda: {f: downstream.RegressorSpec(f) for f in downstream.FAMILIES})


def _cell_seed(base, *names):
    return [base] + [zlib.crc32(n.encode()) for n in names]


def _features(inputs, method, ids):
    if method.features == "coords":
        return np.array([inputs.coords[i] for i in ids], dtype=np.float64)
    return inputs.tables[method.features].rows(ids)


def _fit_predict(inputs, method, task, split, train_ids, train_view, val_view):
    y_train = train_view.get(task, train_ids)
    X_train = _features(inputs, method, train_ids)
    X_test = _features(inputs, method, list(split.test))
    if method.regressor == "idw":
        model = baselines.idw_fit(X_train, y_train)
        return baselines.idw_predict(model, X_test), model
    spec = inputs.specs[method.regressor]
    validation = None
    if method.regressor == "gbdt" and spec.gbdt_patience is not None:
        val_ids = list(split.validation)
        validation = (_features(inputs, method, val_ids), val_view.get(task, val_ids))
    rng = np.random.default_rng(_cell_seed(spec.seed, task, method.name, split.kind))
    model = downstream.fit(spec, X_train, y_train, validation, rng)
    return downstream.predict(model, X_test), model


def run_cell(inputs: BenchInputs, task, method: MethodSpec, split_name):
    """Fit one (task, method, split) cell; returns metrics, predictions and
    the label views it used (for audit)."""
    split = inputs.splits[split_name]
    test_ids = list(split.test)
    val_view = LabelView(inputs.labels, split.validation, "validation")
    test_view = LabelView(inputs.labels, split.test, "test")
    train_view = LabelView(inputs.labels, split.train, "train")
    preds, model = _fit_predict(inputs, method, task, split, list(split.train), train_view, val_view)
    y_test = test_view.get(task, test_ids)
    result = {"r2": metrics.r_squared(y_test, preds), "pearson": metrics.pearson_r(y_test, preds),
              "n_train": len(split.train), "n_test": len(test_ids)}
    if split.kind == "superres":
        counties = [inputs.postal_to_county[p] for p in test_ids]
        ic = metrics.intra_county_pearson(y_test, preds, counties)
        result["intra_county_pearson"] = ic.value
        result["intra_county_n"] = ic.n_counties
        result["intra_county_skipped"] = ic.n_skipped
        result["per_county_pearson"] = {c: r for c, r in ic.per_county}
    if method.regressor == "idw" and split.kind == "interpolation":
        # sanity channel: IDW reproduces its training labels exactly
        X_tr = _features(inputs, method, list(split.train))
        y_tr = np.array([inputs.labels[task][i] for i in split.train])
        result["train_r2"] = metrics.r_squared(y_tr, baselines.idw_predict(model, X_tr))
    if method.regressor == "gbdt":
        result["n_trees"] = len(model.params["trees"])
    views = {"train": train_view.accessed, "validation": val_view.accessed, "test": test_view.accessed}
    return result, preds, views


def _run_cell_safe(args):
    inputs, task, method, split_name = args
    try:
        result, preds, _ = run_cell(inputs, task, method, split_name)
        return result, preds, None
    except (PdfmError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        return None, None, f"{type(exc).__name__}: {exc}"


@dataclass
class EvalReport:
    results: dict
    significance: dict
    splits: dict
    fingerprints: dict
    predictions: dict = field(default_factory=dict)
    forecast: dict = field(default_factory=dict)

    def to_dict(self):
        doc = {"results": self.results, "significance": self.significance,
               "splits": self.splits, "fingerprints": self.fingerprints}
        if self.forecast:
            doc["forecast"] = self.forecast
        return doc

    def to_json(self):
        return json.dumps(_clean(self.to_dict()), sort_keys=True, indent=2) + "\n"

    def rows(self):
        out = []
        for task in sorted(self.results):
            for method in sorted(self.results[task]):
                for split in sorted(self.results[task][method]):
                    cell = self.results[task][method][split]
                    if "failed" in cell:
                        out.append((task, method, split, "failed", cell["failed"]))
                        continue
                    for key in sorted(cell):
                        if isinstance(cell[key], (int, float)):
                            out.append((task, method, split, key, cell[key]))
        return out

    def to_csv(self):
        lines = ["task,method,split,metric,value"]
        for task, method, split, key, value in self.rows():
            if isinstance(value, str):
                value = '"' + value.replace('"', "'") + '"'
            else:
                value = repr(float(value))
            lines.append(f"{task},{method},{split},{key},{value}")
        return "\n".join(lines) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def run_benchmark(inputs: BenchInputs, tasks, methods=None, split_names=None, baseline="idw",
                  workers=1):
    """Evaluate every (task, method, split) cell.

    A failing cell is recorded with its reason and the run continues.
    Every non-baseline method is compared with the baseline by a paired
    t-test on per-region squared errors, Bonferroni-corrected over the
    number of methods compared within a (task, split).
    """
    methods = methods if methods is not None else default_methods()
    split_names = split_names if split_names is not None else list(inputs.splits)
    jobs = [(task, m, s) for task in tasks for m in methods for s in split_names]
    args = [(inputs, t, m, s) for t, m, s in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell_safe, args, chunksize=1))
    else:
        outcomes = [_run_cell_safe(a) for a in args]
    results, preds_by = {}, {}
    for (task, method, split), (res, preds, err) in zip(jobs, outcomes):
        cell = res if err is None else {"failed": err}
        if err is not None:
            logger.warning("cell %s/%s/%s failed: %s", task, method.name, split, err)
        results.setdefault(task, {}).setdefault(method.name, {})[split] = cell
        if preds is not None:
            preds_by[(task, method.name, split)] = preds
    significance = {}
    others = [m.name for m in methods if m.name != baseline]
    for task in tasks:
        for split in split_names:
            base = preds_by.get((task, baseline, split))
            if base is None:
                continue
            test_ids = list(inputs.splits[split].test)
            y = np.array([inputs.labels[task][i] for i in test_ids])
            present = [m for m in others if (task, m, split) in preds_by]
            for m in present:
                t = metrics.paired_t_test((y - preds_by[(task, m, split)]) ** 2, (y - base) ** 2,
                                          m_comparisons=len(present))
                significance.setdefault(task, {}).setdefault(split, {})[f"{m}_vs_{baseline}"] = t.to_dict()
    splits = {name: {"kind": s.kind, "seed": s.seed, "manifest_hash": s.manifest_hash,
                     "n_train": len(s.train), "n_validation": len(s.validation), "n_test": len(s.test)}
              for name, s in inputs.splits.items() if name in split_names}
    fingerprints = {name: t.fingerprint for name, t in sorted(inputs.tables.items())}
    return EvalReport(results, significance, splits, fingerprints, preds_by)


def write_predictions_csv(report, inputs, path):
    with open(path, "w", newline="\n") as fh:
        fh.write("region_id,task,method,split,y_true,y_pred\n")
        for (task, method, split) in sorted(report.predictions):
            ids = inputs.splits[split].test
            for rid, v in zip(ids, report.predictions[(task, method, split)]):
                y = float(inputs.labels[task][rid])
                fh.write(f"{rid},{task},{method},{split},{y!r},{float(v)!r}\n")


# ---------------------------------------------------------------------------
# choropleth

def _ramp(t):
    lo, hi = np.array([68, 1, 84]), np.array([253, 231, 37])
    c = lo + (hi - lo) * float(np.clip(t, 0.0, 1.0))
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in c)


def render_choropleth_svg(coords, values, title="", cells=24, width=480, height=400):
    """Grid choropleth: equal-area lat/lon cells colored by mean value.

    Cells are equal in area on the sphere because rows are spaced evenly in
    sin(latitude).
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    s = np.sin(np.radians(coords[:, 0]))
    lon = coords[:, 1]
    s0, s1 = s.min(), s.max() + 1e-12
    l0, l1 = lon.min(), lon.max() + 1e-12
    row = np.minimum(((s - s0) / (s1 - s0) * cells).astype(int), cells - 1)
    col = np.minimum(((lon - l0) / (l1 - l0) * cells).astype(int), cells - 1)
    vmin, vmax = float(values.min()), float(values.max())
    span = vmax - vmin if vmax > vmin else 1.0
    map_w, map_h = width - 80, height - 40
    cw, ch = map_w / cells, map_h / cells
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="4" y="16" font-size="12">{title}</text>']
    sums = {}
    for r, c, v in zip(row, col, values):
        sums.setdefault((r, c), []).append(v)
    for (r, c) in sorted(sums):
        v = float(np.mean(sums[(r, c)]))
        x = 4 + c * cw
        y = 24 + (cells - 1 - r) * ch
        parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{cw:.2f}" height="{ch:.2f}" '
                     f'fill="{_ramp((v - vmin) / span)}"/>')
    lx = width - 60
    for i in range(10):
        y = 24 + (9 - i) * map_h / 10
        parts.append(f'<rect x="{lx}" y="{y:.2f}" width="14" height="{map_h / 10:.2f}" '
                     f'fill="{_ramp(i / 9)}"/>')
    parts.append(f'<text x="{lx + 16}" y="{24 + 10}" font-size="10">{vmax:.3g}</text>')
    parts.append(f'<text x="{lx + 16}" y="{24 + map_h}" font-size="10">{vmin:.3g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
