"""Run configuration: one YAML document, two built-in presets.

Every section rejects unknown keys.  ``load_config`` starts from the
preset named in the document (``desk`` unless stated), deep-merges the
document over it, then applies command-line overrides.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field

from .downstream import RegressorSpec
from .errors import ConfigError
from .forecast import AdapterConfig, ForecasterSpec
from .graph import GraphConfig
from .pdfm import DESK_PARTITIONS, FULL_PARTITIONS, PdfmConfig
from .sampling import SamplerConfig
from .synthgeo import SynthConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthSection(_Section):
    n_states: int = 10
    n_counties: int = 50
    n_postal: int = 500
    latent_dim: int = 8
    block_dims: dict[str, int] = Field(default_factory=lambda: {
        "trends": 64, "maps": 64, "busyness": 32, "weather_aq": 45})
    feature_noise_std: float = 0.2


class GraphSection(_Section):
    proximity_radius_miles: float = 100.0
    proximity_degree_cap: int = 64
    similarity_k: int = 10
    similarity_source: str = "trends"


class SamplerSection(_Section):
    max_hops: int = 4
    fanout: int = 8
    weighting: Literal["uniform", "edge_weight"] = "edge_weight"


class ModelSection(_Section):
    hidden: int = 256
    embedding_dim: int = 48
    partitions: dict[str, tuple[int, int]] = Field(default_factory=lambda: dict(DESK_PARTITIONS))
    pooling: Literal["sum", "mean"] = "sum"
    share_edge_transforms: bool = False
    huber_delta: float = 1.0
    lr_max: float = 2e-3
    lr_min: float = 0.0
    epochs: int = 30
    batch_size: int = 32
    validation_fraction: float = 0.2


class RegressorSection(_Section):
    ridge_lambda: float = 1.0
    mlp_dims: tuple[int, int, int] = (512, 256, 128)
    mlp_dropout: float = 0.2
    mlp_lr: float = 0.005
    mlp_epochs: int = 40
    mlp_batch_size: int = 256
    gbdt_max_trees: int = 3000
    gbdt_max_leaves: int = 31
    gbdt_min_leaf: int = 40
    gbdt_lr: float = 0.02
    gbdt_patience: Optional[int] = 50


class SplitSection(_Section):
    holdout_fraction: float = 0.2
    validation_fraction: float = 0.2


class BenchSection(_Section):
    tasks: Optional[list[str]] = None
    families: list[Literal["ridge", "mlp", "gbdt"]] = Field(
        default_factory=lambda: ["ridge", "mlp", "gbdt"])
    modality_slices: bool = False
    external_width: int = 0
    svg_maps: bool = False


class ForecastTaskSection(_Section):
    family: Literal["naive_last", "seasonal_naive", "ar", "arima"] = "seasonal_naive"
    order: tuple[int, int, int] = (2, 0, 0)
    part2: int = 12
    part3: int = 12
    arima_order: tuple[int, int, int] = (1, 1, 1)
    external_forecasts: Optional[str] = None


class ForecastSection(_Section):
    tasks: dict[str, ForecastTaskSection] = Field(default_factory=lambda: {
        "unemployment": ForecastTaskSection(family="seasonal_naive", part2=12, part3=12),
        "poverty": ForecastTaskSection(family="ar", order=(2, 0, 0), part2=1, part3=1,
                                       arima_order=(1, 1, 0)),
    })
    adapter_hidden: tuple[int, int] = (64, 32)
    adapter_epochs: int = 100
    adapter_lr: float = 0.005


class RunConfig(_Section):
    preset: Literal["desk", "full"] = "desk"
    seed: int = 0
    out_dir: Optional[str] = None
    synth: SynthSection = SynthSection()
    graph: GraphSection = GraphSection()
    sampler: SamplerSection = SamplerSection()
    model: ModelSection = ModelSection()
    regressors: RegressorSection = RegressorSection()
    splits: SplitSection = SplitSection()
    bench: BenchSection = BenchSection()
    forecast: ForecastSection = ForecastSection()

    # -- conversions into the library's own config objects --

    def synth_config(self):
        s = self.synth
        noise = {k: s.feature_noise_std for k in s.block_dims}
        n_smooth = s.latent_dim // 2
        scales = (220.0, 160.0, 260.0, 190.0) * (n_smooth // 4 + 1)
        length_scales = tuple(scales[:n_smooth]) + (0.0,) * (s.latent_dim - n_smooth)
        return SynthConfig(rng_seed=self.seed, n_states=s.n_states, n_counties=s.n_counties,
                           n_postal=s.n_postal, latent_dim=s.latent_dim,
                           block_dims=dict(s.block_dims), length_scales=length_scales,
                           feature_noise_std=noise)

    def graph_config(self):
        return GraphConfig(**self.graph.model_dump())

    def sampler_config(self):
        return SamplerConfig(**self.sampler.model_dump(), seed=self.seed)

    def embed_sampler_config(self):
        return SamplerConfig(**self.sampler.model_dump(), seed=self.seed + 12345)

    def pdfm_config(self):
        m = self.model.model_dump()
        m["partitions"] = {k: tuple(v) for k, v in m["partitions"].items()}
        return PdfmConfig(input_widths=dict(self.synth.block_dims), seed=self.seed, **m)

    def regressor_specs(self):
        r = self.regressors.model_dump()
        r["mlp_dims"] = tuple(r["mlp_dims"])
        return {fam: RegressorSpec(fam, seed=self.seed, **r) for fam in self.bench.families}

    def forecaster_spec(self, task, period):
        t = self.forecast.tasks[task]
        return ForecasterSpec(t.family, tuple(t.order), period)

    def adapter_config(self):
        f = self.forecast
        return AdapterConfig(tuple(f.adapter_hidden), f.adapter_epochs, f.adapter_lr, seed=self.seed)

    def fingerprint(self, *sections):
        doc = self.model_dump(mode="json")
        if sections:
            doc = {k: doc[k] for k in ("seed",) + sections}
        doc.pop("out_dir", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


PRESETS = {
    "desk": {},
    "full": {
        "synth": {"block_dims": {"trends": 1000, "maps": 1192, "busyness": 1192, "weather_aq": 45}},
        "model": {"hidden": 256, "embedding_dim": 330,
                  "partitions": {k: list(v) for k, v in FULL_PARTITIONS.items()}},
    },
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("block_dims", "partitions", "tasks"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(doc, key, value):
    parts = key.split(".")
    cur = doc
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(key, "cannot override inside a scalar")
    cur[parts[-1]] = value


PRESET_ALIASES = {"paper": "full"}


def build_config(doc=None, overrides=None):
    doc = dict(doc or {})
    preset = PRESET_ALIASES.get(doc.get("preset", "desk"), doc.get("preset", "desk"))
    doc["preset"] = preset
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], doc)
    for key, value in (overrides or {}).items():
        _set_dotted(merged, key, value)
    try:
        return RunConfig.model_validate(merged)
    except pydantic.ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(p) for p in err["loc"]) or "<root>"
        raise ConfigError(field, err["msg"]) from None


def load_config(path=None, overrides=None):
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("<document>", f"malformed YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("<document>", "top level must be a mapping")
    return build_config(doc, overrides)


def dump_config(cfg: RunConfig):
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
