"""Deterministic synthetic world with known latent structure.

Postal centroids are scattered inside rectangular state cells, counties are
Voronoi cells around seed postal codes within each state, and every postal
code carries a latent vector ``z``.  Smooth latent factors are sums of
Gaussian bumps over geography; rough factors are white noise.  Feature
blocks, labels and time series are all functions of ``z`` so the benchmark
tasks have a known answer: IDW can only exploit the smooth part, an
embedding of the features can exploit both.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .features import FeatureBlock, aggregate_to_county, normalize_trends
from .forecast import SeriesPanel
from .graph import Region, pairwise_distance_miles

logger = logging.getLogger(__name__)

LABEL_FUNCTIONS = {
    "linear": lambda s: s,
    "tanh": np.tanh,
    "sigmoid": lambda s: 1.0 / (1.0 + np.exp(-s)),
    "softplus": lambda s: np.logaddexp(0.0, s),
    "cubic": lambda s: s + 0.15 * s ** 3,
}


@dataclass(frozen=True)
class LabelSpec:
    name: str
    function: str
    factors: tuple
    noise_std: float = 0.1
    rough: bool = False
    neighbor_weight: float = 0.0
    scale: float = 1.0
    offset: float = 0.0


@dataclass(frozen=True)
class SeriesSpec:
    task: str
    level: str = "county"
    frequency: str = "monthly"
    n_steps: int = 48
    ar_coefficient: float = 0.6
    ar_noise_std: float = 0.1
    slope_range: tuple = (-0.08, 0.08)
    bias_scale: float = 1.0
    base_level: float = 8.0
    seasonal_amplitude: float = 0.0
    period: int = 12
    slope_factor: int = 4
    bias_factor: int = 5


DESK_LABELS = (
    LabelSpec("elevation", "linear", (0,), noise_std=0.05, rough=False, scale=300.0, offset=1000.0),
    LabelSpec("tree_cover", "sigmoid", (1, 2), noise_std=0.05, rough=False),
    LabelSpec("income", "tanh", (4, 5), noise_std=0.05, rough=True, scale=20.0, offset=60.0),
    LabelSpec("night_lights", "softplus", (6,), noise_std=0.05, rough=True),
    LabelSpec("obesity", "linear", (2, 7), noise_std=0.1, rough=False, neighbor_weight=0.5,
              scale=5.0, offset=30.0),
    LabelSpec("diabetes", "cubic", (3, 5), noise_std=0.1, rough=False, scale=2.0, offset=10.0),
)

DESK_SERIES = (
    SeriesSpec("unemployment", level="county", frequency="monthly", n_steps=48,
               ar_coefficient=0.6, ar_noise_std=0.05, slope_range=(-0.08, 0.08),
               bias_scale=1.0, base_level=6.0, seasonal_amplitude=0.4, period=12,
               slope_factor=4, bias_factor=5),
    SeriesSpec("poverty", level="postal", frequency="yearly", n_steps=14,
               ar_coefficient=0.5, ar_noise_std=0.002, slope_range=(-0.006, 0.006),
               bias_scale=0.03, base_level=0.15, seasonal_amplitude=0.0, period=1,
               slope_factor=6, bias_factor=3),
)


@dataclass(frozen=True)
class SynthConfig:
    rng_seed: int = 0
    n_states: int = 10
    n_counties: int = 50
    n_postal: int = 500
    latent_dim: int = 8
    block_dims: dict = field(default_factory=lambda: {
        "trends": 64, "maps": 64, "busyness": 32, "weather_aq": 45})
    length_scales: tuple = (220.0, 160.0, 260.0, 190.0, 0.0, 0.0, 0.0, 0.0)
    n_bumps: int = 10
    feature_noise_std: dict = field(default_factory=lambda: {
        "trends": 0.2, "maps": 0.2, "busyness": 0.2, "weather_aq": 0.2})
    label_specs: tuple = DESK_LABELS
    series_specs: tuple = DESK_SERIES
    lat_range: tuple = (33.0, 43.0)
    lon_range: tuple = (-100.0, -86.0)
    label_radius_miles: float = 100.0

    def __post_init__(self):
        validate_config(self)


def validate_config(cfg):
    if cfg.n_states < 1:
        raise ConfigError("n_states", "must be at least 1")
    if cfg.n_counties < cfg.n_states:
        raise ConfigError("n_counties", "must be >= n_states")
    if cfg.n_postal < cfg.n_counties:
        raise ConfigError("n_postal", "must be >= n_counties")
    if cfg.latent_dim < 1:
        raise ConfigError("latent_dim", "must be at least 1")
    if len(cfg.length_scales) != cfg.latent_dim:
        raise ConfigError("length_scales", f"need {cfg.latent_dim} entries")
    if any(ls < 0 for ls in cfg.length_scales):
        raise ConfigError("length_scales", "must be nonnegative (0 marks a rough factor)")
    for source, dim in cfg.block_dims.items():
        if source not in ("trends", "maps", "busyness", "weather_aq"):
            raise ConfigError("block_dims", f"unknown source {source!r}")
        if dim < 1:
            raise ConfigError("block_dims", f"{source} width must be at least 1")
    if cfg.block_dims.get("weather_aq", 3) % 3:
        raise ConfigError("block_dims", "weather_aq width must be a multiple of 3 (mean/min/max)")
    for source, std in cfg.feature_noise_std.items():
        if std < 0:
            raise ConfigError("feature_noise_std", f"{source} noise must be >= 0")
    for spec in cfg.label_specs:
        if spec.function not in LABEL_FUNCTIONS:
            raise ConfigError("label_specs", f"{spec.name}: unknown function {spec.function!r}")
        if spec.noise_std < 0:
            raise ConfigError("label_specs", f"{spec.name}: noise std must be >= 0")
        if not spec.factors or any(not 0 <= f < cfg.latent_dim for f in spec.factors):
            raise ConfigError("label_specs", f"{spec.name}: factor index out of range")
    for spec in cfg.series_specs:
        if not abs(spec.ar_coefficient) < 1:
            raise ConfigError("series_specs", f"{spec.task}: |ar_coefficient| must be < 1")
        if spec.n_steps < 3:
            raise ConfigError("series_specs", f"{spec.task}: need at least 3 steps")
        if spec.level not in ("postal", "county"):
            raise ConfigError("series_specs", f"{spec.task}: level must be postal or county")
        if spec.ar_noise_std < 0:
            raise ConfigError("series_specs", f"{spec.task}: noise std must be >= 0")
        for f in (spec.slope_factor, spec.bias_factor):
            if not 0 <= f < cfg.latent_dim:
                raise ConfigError("series_specs", f"{spec.task}: factor index out of range")
    lo, hi = cfg.lat_range
    if not -90 <= lo < hi <= 90:
        raise ConfigError("lat_range", "invalid latitude range")
    lo, hi = cfg.lon_range
    if not -180 <= lo < hi <= 180:
        raise ConfigError("lon_range", "invalid longitude range")


@dataclass
class WorldBundle:
    config: SynthConfig
    regions: list
    postal_blocks: dict
    county_blocks: dict
    latents: np.ndarray
    labels: dict
    series: dict
    membership: dict

    @property
    def postal_ids(self):
        return [r.id for r in self.regions if r.kind == "postal"]

    @property
    def county_ids(self):
        return [r.id for r in self.regions if r.kind == "county"]

    def blocks(self):
        """Blocks covering every region, postal rows first."""
        out = {}
        for source, pb in self.postal_blocks.items():
            cb = self.county_blocks[source]
            out[source] = FeatureBlock(source, pb.ids + cb.ids, np.vstack([pb.values, cb.values]),
                                       pb.columns)
        return out

    def region_by_id(self):
        return {r.id: r for r in self.regions}


def _split_counts(total, parts):
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _geometry(cfg, rng):
    n_rows = max(1, int(math.isqrt(cfg.n_states)))
    n_cols = -(-cfg.n_states // n_rows)
    lat0, lat1 = cfg.lat_range
    lon0, lon1 = cfg.lon_range
    dlat = (lat1 - lat0) / n_rows
    dlon = (lon1 - lon0) / n_cols
    postal_per = _split_counts(cfg.n_postal, cfg.n_states)
    county_per = _split_counts(cfg.n_counties, cfg.n_states)
    postal, counties, membership = [], [], {}
    p_next = c_next = 0
    for s in range(cfg.n_states):
        r, c = divmod(s, n_cols)
        state = f"S{s:02d}"
        lat = rng.uniform(lat0 + r * dlat, lat0 + (r + 1) * dlat, postal_per[s])
        lon = rng.uniform(lon0 + c * dlon, lon0 + (c + 1) * dlon, postal_per[s])
        coords = np.column_stack([lat, lon])
        seeds = coords[: county_per[s]]
        owner = np.argmin(pairwise_distance_miles(coords, seeds), axis=1)
        county_ids = [f"C{c_next + j:03d}" for j in range(county_per[s])]
        c_next += county_per[s]
        for j, cid in enumerate(county_ids):
            members = coords[owner == j]
            counties.append(Region(cid, "county", float(members[:, 0].mean()),
                                   float(members[:, 1].mean()), state))
        for i in range(postal_per[s]):
            pid = f"P{p_next:04d}"
            p_next += 1
            cid = county_ids[owner[i]]
            postal.append(Region(pid, "postal", float(coords[i, 0]), float(coords[i, 1]), state,
                                 cid, 1.0))
            membership[pid] = cid
    return postal, counties, membership


def _latents(cfg, coords, rng):
    n = len(coords)
    z = np.zeros((n, cfg.latent_dim))
    lat0, lat1 = cfg.lat_range
    lon0, lon1 = cfg.lon_range
    for f, ls in enumerate(cfg.length_scales):
        if ls > 0:
            centers = np.column_stack([rng.uniform(lat0, lat1, cfg.n_bumps),
                                       rng.uniform(lon0, lon1, cfg.n_bumps)])
            amp = rng.normal(size=cfg.n_bumps)
            d = pairwise_distance_miles(coords, centers)
            z[:, f] = np.exp(-0.5 * (d / ls) ** 2) @ amp
        else:
            z[:, f] = rng.normal(size=n)
        z[:, f] = (z[:, f] - z[:, f].mean()) / max(z[:, f].std(), 1e-12)
    return z


def _feature_blocks(cfg, z, ids, rng):
    k = cfg.latent_dim
    blocks = {}
    for source in ("trends", "maps", "busyness", "weather_aq"):
        if source not in cfg.block_dims:
            continue
        width = cfg.block_dims[source]
        noise = cfg.feature_noise_std.get(source, 0.0)
        if source == "weather_aq":
            n_var = width // 3
            mix = rng.normal(size=(k, n_var)) / math.sqrt(k)
            spread_mix = rng.normal(size=(k, n_var)) / math.sqrt(k)
            mean = z @ mix + noise * rng.normal(size=(len(z), n_var))
            spread = np.logaddexp(0.0, z @ spread_mix + 0.5)
            values = np.empty((len(z), width))
            values[:, 0::3] = mean
            values[:, 1::3] = mean - spread
            values[:, 2::3] = mean + spread
            columns = [f"w{v:02d}_{stat}" for v in range(n_var) for stat in ("mean", "min", "max")]
        else:
            mix = rng.normal(size=(k, width)) / math.sqrt(k)
            values = z @ mix + noise * rng.normal(size=(len(z), width))
            if source == "trends":
                counts = np.exp(values)
                values = np.vstack([normalize_trends(row) for row in counts])
                columns = [f"q{j:03d}" for j in range(width)]
            else:
                prefix = "poi" if source == "maps" else "busy"
                columns = [f"{prefix}{j:03d}" for j in range(width)]
        blocks[source] = FeatureBlock(source, ids, values, columns)
    return blocks


def _labels(cfg, z, coords, postal_ids, membership, county_ids, rng):
    dist = pairwise_distance_miles(coords, coords)
    near = (dist <= cfg.label_radius_miles) & ~np.eye(len(coords), dtype=bool)
    deg = near.sum(axis=1)
    labels = {}
    for spec in cfg.label_specs:
        signal = z[:, list(spec.factors)].sum(axis=1) / math.sqrt(len(spec.factors))
        value = LABEL_FUNCTIONS[spec.function](signal)
        if spec.neighbor_weight:
            nbr_mean = np.where(deg > 0, (near @ value) / np.maximum(deg, 1), value)
            value = value + spec.neighbor_weight * nbr_mean
        value = value + spec.noise_std * rng.normal(size=len(value))
        value = spec.offset + spec.scale * value
        task = dict(zip(postal_ids, value.tolist()))
        sums = {}
        for pid, cid in membership.items():
            sums.setdefault(cid, []).append(task[pid])
        for cid in county_ids:
            task[cid] = float(np.mean(sums[cid]))
        labels[spec.name] = task
    return labels


def _series(cfg, z, postal_ids, membership, county_ids, rng):
    panels = {}
    for spec in cfg.series_specs:
        T = spec.n_steps
        t = np.arange(T)
        lo, hi = spec.slope_range
        slope = lo + (hi - lo) / (1.0 + np.exp(-z[:, spec.slope_factor]))
        bias = spec.bias_scale * z[:, spec.bias_factor]
        phase = rng.uniform(0, 2 * math.pi)
        season = spec.seasonal_amplitude * np.sin(2 * math.pi * t / max(spec.period, 1) + phase)
        phi, sd = spec.ar_coefficient, spec.ar_noise_std
        ar = np.zeros((len(z), T))
        ar[:, 0] = rng.normal(size=len(z)) * sd / math.sqrt(1 - phi ** 2)
        for step in range(1, T):
            ar[:, step] = phi * ar[:, step - 1] + sd * rng.normal(size=len(z))
        values = spec.base_level + bias[:, None] + slope[:, None] * t[None, :] + season[None, :] + ar
        if spec.level == "county":
            rows = {}
            for i, pid in enumerate(postal_ids):
                rows.setdefault(membership[pid], []).append(i)
            values = np.vstack([values[rows[c]].mean(axis=0) for c in county_ids])
            ids = list(county_ids)
        else:
            ids = list(postal_ids)
        panels[spec.task] = SeriesPanel(spec.task, tuple(ids), values,
                                        frequency=spec.frequency, period=spec.period)
    return panels


def generate_world(cfg: SynthConfig = SynthConfig()) -> WorldBundle:
    """Build the synthetic world; a pure function of ``cfg``."""
    validate_config(cfg)
    streams = np.random.SeedSequence(cfg.rng_seed).spawn(5)
    geo_rng, lat_rng, feat_rng, label_rng, series_rng = (np.random.default_rng(s) for s in streams)
    postal, counties, membership = _geometry(cfg, geo_rng)
    postal_ids = [r.id for r in postal]
    county_ids = [r.id for r in counties]
    coords = np.array([(r.lat, r.lon) for r in postal])
    z = _latents(cfg, coords, lat_rng)
    postal_blocks = _feature_blocks(cfg, z, postal_ids, feat_rng)
    county_blocks = {s: aggregate_to_county(b, membership, county_ids)
                     for s, b in postal_blocks.items()}
    labels = _labels(cfg, z, coords, postal_ids, membership, county_ids, label_rng)
    series = _series(cfg, z, postal_ids, membership, county_ids, series_rng)
    return WorldBundle(cfg, postal + counties, postal_blocks, county_blocks, z, labels, series,
                       membership)


def coordinate_embedding(regions, width=16, seed=0, scale_miles=(150.0, 600.0)):
    """Random Fourier features of region centroids.

    A stand-in for an external location encoder: a function of coordinates
    only, with no access to features or labels.
    """
    rng = np.random.default_rng(seed)
    lat = np.radians([r.lat for r in regions])
    lon = np.radians([r.lon for r in regions])
    xyz = np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
    half = max(width // 2, 1)
    scales = np.exp(rng.uniform(np.log(scale_miles[0]), np.log(scale_miles[1]), half))
    freq = rng.normal(size=(3, half)) * (3958.761 / scales)
    phase = xyz @ freq
    feats = np.hstack([np.cos(phase), np.sin(phase)])[:, :width]
    return [r.id for r in regions], feats
