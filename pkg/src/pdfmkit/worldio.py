"""CSV formats for world data.

``regions.csv``            id,kind,lat,lon,state,county,overlap_weight
``features_<source>.csv``  region_id,<column>...
``labels.csv``             region_id,task,value
``series_<task>.csv``      region_id,t0,t1,...

Floats are written with ``repr`` so a round trip is bit-exact, lines end
in LF, rows keep the world's region order.  Real data prepared in the same
schemas can be loaded with :func:`read_world`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, SchemaError
from .features import FeatureBlock
from .forecast import SeriesPanel, read_series_csv, write_series_csv
from .graph import Region

REGION_HEADER = ["id", "kind", "lat", "lon", "state", "county", "overlap_weight"]


@dataclass
class WorldFiles:
    """What downstream stages need from a world, however it was produced."""

    regions: list
    blocks: dict
    labels: dict
    series: dict

    @property
    def postal_ids(self):
        return [r.id for r in self.regions if r.kind == "postal"]

    @property
    def county_ids(self):
        return [r.id for r in self.regions if r.kind == "county"]


def _f(v):
    return repr(float(v))


def write_world(world, directory):
    """Write a :class:`~pdfmkit.synthgeo.WorldBundle`; returns the file list."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    path = directory / "regions.csv"
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(REGION_HEADER) + "\n")
        for r in world.regions:
            fh.write(f"{r.id},{r.kind},{_f(r.lat)},{_f(r.lon)},{r.state},{r.county or ''},"
                     f"{_f(r.overlap_weight)}\n")
    written.append(path)
    for source, block in world.blocks().items():
        path = directory / f"features_{source}.csv"
        with open(path, "w", newline="\n") as fh:
            fh.write("region_id," + ",".join(block.columns) + "\n")
            for rid, row in zip(block.ids, block.values):
                fh.write(rid + "," + ",".join(_f(v) for v in row) + "\n")
        written.append(path)
    path = directory / "labels.csv"
    with open(path, "w", newline="\n") as fh:
        fh.write("region_id,task,value\n")
        for task in world.labels:
            for r in world.regions:
                if r.id in world.labels[task]:
                    fh.write(f"{r.id},{task},{_f(world.labels[task][r.id])}\n")
    written.append(path)
    meta = {}
    for task, panel in world.series.items():
        path = directory / f"series_{task}.csv"
        write_series_csv(panel, path)
        written.append(path)
        meta[task] = {"frequency": panel.frequency, "period": panel.period}
    (directory / "series.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return written


def read_regions(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REGION_HEADER:
            raise SchemaError(f"{path}: expected header {REGION_HEADER}, got {header}")
        for row in reader:
            rid, kind, lat, lon, state, county, w = row
            out.append(Region(rid, kind, float(lat), float(lon), state, county or None, float(w)))
    return out


def read_block(path, source):
    ids, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "region_id":
            raise SchemaError(f"{path}: first column must be region_id")
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) if v != "" else np.nan for v in row[1:]])
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    return FeatureBlock(source, tuple(ids), values, tuple(header[1:]))


def read_labels(path):
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != ["region_id", "task", "value"]:
            raise SchemaError(f"{path}: expected header region_id,task,value")
        for rid, task, value in reader:
            labels.setdefault(task, {})[rid] = float(value)
    return labels


def read_world(directory):
    directory = Path(directory)
    if not (directory / "regions.csv").exists():
        raise DataError(f"{directory} holds no regions.csv")
    regions = read_regions(directory / "regions.csv")
    blocks = {}
    for path in sorted(directory.glob("features_*.csv")):
        source = path.stem[len("features_"):]
        blocks[source] = read_block(path, source)
    labels = read_labels(directory / "labels.csv") if (directory / "labels.csv").exists() else {}
    meta_path = directory / "series.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    series = {}
    for path in sorted(directory.glob("series_*.csv")):
        task = path.stem[len("series_"):]
        m = meta.get(task, {})
        series[task] = read_series_csv(path, task, m.get("frequency", "monthly"), m.get("period", 12))
    return WorldFiles(regions, blocks, labels, series)


def panel_for(world, task) -> SeriesPanel:
    if task not in world.series:
        raise DataError(f"no series for task {task!r}; have {sorted(world.series)}")
    return world.series[task]
