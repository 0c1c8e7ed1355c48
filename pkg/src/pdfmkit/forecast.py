"""Two-stage forecast correction.

A base forecaster (any univariate method; seasonal-naive or AR stand-ins
here, externally produced forecasts via files) predicts each region's
series.  An adapter MLP, fed the base prediction and the region's
embedding, learns to correct it on a held-back stretch of history and is
then applied to later predictions.  A supervised ARIMA fitted by
conditional least squares serves as the comparison method.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .downstream import fit_mlp_net
from .errors import FitError, ForecastError, JoinError, ValidationError

logger = logging.getLogger(__name__)

FAMILIES = ("naive_last", "seasonal_naive", "ar", "arima")


@dataclass(frozen=True)
class SeriesPanel:
    task: str
    ids: tuple
    values: np.ndarray
    frequency: str = "monthly"
    period: int = 12
    valid: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != len(self.ids):
            raise ValidationError(f"{self.task}: series matrix {values.shape} vs {len(self.ids)} ids")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "values", values)
        if self.valid is None:
            object.__setattr__(self, "valid", np.isfinite(values).all(axis=1))

    @property
    def n_steps(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class ThreePartSplit:
    """Half-open step ranges; part1 is context, part2 trains the adapter,
    part3 is scored."""

    part1: tuple
    part2: tuple
    part3: tuple

    def __post_init__(self):
        (a0, a1), (b0, b1), (c0, c1) = self.part1, self.part2, self.part3
        if a0 != 0 or a1 <= a0:
            raise ValidationError("part1 must start at 0 and be nonempty")
        if not (b0 == a1 and c0 == b1 and b1 > b0 and c1 > c0):
            raise ValidationError("parts must be contiguous, ordered and nonempty")

    @classmethod
    def from_lengths(cls, n_steps, part2_len, part3_len):
        b = n_steps - part3_len
        a = b - part2_len
        return cls((0, a), (a, b), (b, n_steps))


@dataclass(frozen=True)
class ForecasterSpec:
    family: str = "seasonal_naive"
    order: tuple = (1, 0, 0)
    period: int = 12

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown forecaster family {self.family!r}")
        p, d, q = self.order
        if min(p, d, q) < 0:
            raise ValidationError("ARIMA orders must be nonnegative")
        if self.family in ("ar", "arima") and p + q < 1:
            raise ValidationError("ar/arima need p + q >= 1")

    def min_context(self):
        p, d, _ = self.order
        season = self.period if self.family == "seasonal_naive" else 0
        return max(p + d, season, 3)


# ---------------------------------------------------------------------------
# ARIMA by conditional least squares

@dataclass
class ArimaModel:
    order: tuple
    intercept: float
    phi: np.ndarray
    theta: np.ndarray
    sigma2: float
    w_tail: np.ndarray
    e_tail: np.ndarray
    level_tails: list
    objective_trace: list = field(default_factory=list)
    converged: bool = True
    unstable: bool = False


def _difference(y, d):
    levels = []
    w = np.asarray(y, dtype=np.float64)
    for _ in range(d):
        levels.append(w[-1])
        w = np.diff(w)
    return w, levels


def _css_residuals(w, c, phi, theta, with_jacobian=False):
    p, q = len(phi), len(theta)
    n = len(w)
    e = np.zeros(n)
    k = 1 + p + q
    J = np.zeros((n, k)) if with_jacobian else None
    for t in range(p, n):
        ar = np.dot(phi, w[t - p:t][::-1]) if p else 0.0
        lag_e = e[max(t - q, 0):t][::-1]
        ma = np.dot(theta[:len(lag_e)], lag_e) if q else 0.0
        e[t] = w[t] - c - ar - ma
        if with_jacobian:
            row = np.empty(k)
            row[0] = -1.0
            if p:
                row[1:1 + p] = -w[t - p:t][::-1]
            if q:
                row[1 + p:] = -np.concatenate([lag_e, np.zeros(q - len(lag_e))])
                lag_j = J[max(t - q, 0):t][::-1]
                row -= theta[:len(lag_j)] @ lag_j
            J[t] = row
    return (e[p:], J[p:]) if with_jacobian else e[p:]


def _ols(X, y):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef


def _lag_matrix(x, lags, start):
    return np.column_stack([x[start - i:len(x) - i] for i in range(1, lags + 1)]) if lags else \
        np.zeros((len(x) - start, 0))


def _hannan_rissanen(w, p, q):
    n = len(w)
    if q == 0:
        if p == 0:
            return float(w.mean()), np.zeros(0), np.zeros(0)
        X = np.column_stack([np.ones(n - p), _lag_matrix(w, p, p)])
        coef = _ols(X, w[p:])
        return float(coef[0]), coef[1:], np.zeros(0)
    m = int(min(max(p + q + 2, math.ceil(math.log(n) ** 1.5)), n // 4))
    m = max(m, p + q)
    X = np.column_stack([np.ones(n - m), _lag_matrix(w, m, m)])
    coef = _ols(X, w[m:])
    resid = np.zeros(n)
    resid[m:] = w[m:] - X @ coef
    start = m + max(p, q)
    cols = [np.ones(n - start)]
    if p:
        cols.append(_lag_matrix(w, p, start))
    cols.append(_lag_matrix(resid, q, start))
    coef = _ols(np.column_stack(cols), w[start:])
    return float(coef[0]), coef[1:1 + p], coef[1 + p:]


def _ma_invertible(theta, margin=1e-4):
    if len(theta) == 0:
        return True
    # inverse roots of 1 + theta_1 z + ... + theta_q z^q must lie inside the unit circle
    return bool(np.all(np.abs(np.roots(np.concatenate([[1.0], theta]))) < 1.0 - margin))


def arima_fit(series, p, d, q, tol=1e-8, max_iter=500):
    """Fit ARIMA(p, d, q) with intercept by conditional least squares.

    Starts from a Hannan-Rissanen estimate and refines by damped
    Gauss-Newton descent on the conditional sum of squares; every accepted
    step lowers the objective, so ``objective_trace`` never increases.
    The MA part is kept invertible: a non-invertible initial estimate is
    replaced by zeros and steps leaving the invertible region are refused.
    """
    if min(p, d, q) < 0:
        raise ValidationError("orders must be nonnegative")
    w, levels = _difference(series, d)
    n = len(w)
    if n < max(10 * (p + q), p + 1, 1):
        raise FitError(f"series too short for ARIMA({p},{d},{q}): {n} values after differencing")
    c, phi, theta = _hannan_rissanen(w, p, q)
    if not _ma_invertible(theta):
        theta = np.zeros(q)
    beta = np.concatenate([[c], phi, theta])

    def unpack(b):
        return b[0], b[1:1 + p], b[1 + p:]

    e = _css_residuals(w, *unpack(beta))
    obj = float(e @ e)
    trace = [obj]
    converged = q == 0  # least squares is already the CSS optimum for pure AR
    damping = 1e-3
    it = 0
    while not converged and it < max_iter:
        it += 1
        e, J = _css_residuals(w, *unpack(beta), with_jacobian=True)
        grad = J.T @ e
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        JTJ = J.T @ J
        accepted = False
        for _ in range(40):
            A = JTJ + damping * (np.diag(np.diag(JTJ)) + 1e-12 * np.eye(len(beta)))
            try:
                step = np.linalg.solve(A, -grad)
            except np.linalg.LinAlgError:
                damping *= 10
                continue
            cand = beta + step
            if not _ma_invertible(cand[1 + p:]):
                damping *= 4
                continue
            e_new = _css_residuals(w, *unpack(cand))
            new_obj = float(e_new @ e_new)
            if np.isfinite(new_obj) and new_obj <= obj:
                accepted = True
                break
            damping *= 4
        if not accepted:
            converged = True  # no descent direction left at working precision
            break
        small_step = np.max(np.abs(step)) <= tol * (1.0 + np.max(np.abs(beta)))
        damping = max(damping / 3, 1e-12)
        beta = cand
        improvement = obj - new_obj
        obj = new_obj
        trace.append(obj)
        if improvement <= tol * max(1.0, obj) or small_step:
            converged = True
    if not converged:
        raise FitError(f"ARIMA({p},{d},{q}) CSS did not converge in {max_iter} iterations", trace)
    c, phi, theta = unpack(beta)
    e_full = np.zeros(n)
    e_full[p:] = _css_residuals(w, c, phi, theta)
    unstable = False
    if p:
        roots = np.roots(np.concatenate([-phi[::-1], [1.0]]))
        unstable = bool(np.any(np.abs(roots) <= 1.0))
        if unstable:
            logger.warning("ARIMA(%d,%d,%d): AR polynomial has roots on/inside the unit circle", p, d, q)
    dof = max(n - p - len(beta), 1)
    return ArimaModel((p, d, q), float(c), np.array(phi), np.array(theta), obj / dof,
                      w[n - p:].copy() if p else np.zeros(0),
                      e_full[n - q:].copy() if q else np.zeros(0),
                      levels, trace, converged, unstable)


def arima_forecast(model, h):
    """Iterate one-step predictions (future shocks zero), then undo differencing."""
    if h <= 0:
        return np.zeros(0)
    p, d, q = model.order
    w_hist = list(model.w_tail)
    e_hist = list(model.e_tail)
    out = []
    for _ in range(h):
        ar = sum(model.phi[i] * w_hist[-1 - i] for i in range(p))
        ma = sum(model.theta[j] * e_hist[-1 - j] for j in range(q) if j < len(e_hist))
        nxt = model.intercept + ar + ma
        out.append(nxt)
        w_hist.append(nxt)
        e_hist.append(0.0)
    fc = np.array(out)
    for last in reversed(model.level_tails):
        fc = last + np.cumsum(fc)
    return fc


def ar_fit_forecast(context, p, d, h):
    """Least-squares AR(p) with intercept on the d-differenced context."""
    w, levels = _difference(context, d)
    if len(w) - p < p + 1:
        raise ForecastError(f"AR({p}) needs at least {2 * p + 1} differenced values, got {len(w)}")
    X = np.column_stack([np.ones(len(w) - p), _lag_matrix(w, p, p)])
    coef = _ols(X, w[p:])
    model = ArimaModel((p, d, 0), float(coef[0]), coef[1:], np.zeros(0), 0.0,
                       w[len(w) - p:].copy(), np.zeros(0), levels)
    return arima_forecast(model, h)


def base_forecast(context, spec: ForecasterSpec, h):
    context = np.asarray(context, dtype=np.float64)
    if len(context) < spec.min_context():
        raise ForecastError(f"{spec.family} needs {spec.min_context()} context steps, got {len(context)}")
    if h <= 0:
        return np.zeros(0)
    if not np.all(np.isfinite(context)):
        raise ForecastError("context contains missing values")
    if spec.family == "naive_last":
        return np.full(h, context[-1])
    if spec.family == "seasonal_naive":
        last = context[-spec.period:]
        return np.array([last[i % spec.period] for i in range(h)])
    p, d, q = spec.order
    if spec.family == "ar":
        return ar_fit_forecast(context, p, d, h)
    return arima_forecast(arima_fit(context, p, d, q), h)


# ---------------------------------------------------------------------------
# adapter

@dataclass
class AdapterModel:
    net: object
    x_stats: tuple
    y_stats: tuple
    embedding_width: int
    history: list

    def predict(self, base, emb):
        base = np.asarray(base, dtype=np.float64).reshape(-1)
        emb = np.asarray(emb, dtype=np.float64).reshape(len(base), self.embedding_width)
        X = np.column_stack([base, emb])
        out, _ = self.net.forward((X - self.x_stats[0]) / self.x_stats[1], training=False)
        return base + out[:, 0] * self.y_stats[1] + self.y_stats[0]


@dataclass(frozen=True)
class AdapterConfig:
    hidden: tuple = (64, 32)
    epochs: int = 100
    lr: float = 0.005
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if len(self.hidden) != 2:
            raise ValidationError("the adapter has exactly two hidden layers")


def train_adapter(base_pred, embeddings, actuals, cfg: AdapterConfig = AdapterConfig(), rng=None):
    """Fit the correction ``actual - base`` from ``[base, embedding]``.

    ``base_pred``/``actuals`` are ``(n,)`` or ``(n, steps)``; every
    (region, step) pair is one training row sharing that region's embedding.
    """
    base_pred = np.asarray(base_pred, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    if base_pred.ndim == 1:
        base_pred = base_pred[:, None]
        actuals = actuals.reshape(-1, 1)
    embeddings = np.asarray(embeddings, dtype=np.float64).reshape(len(base_pred), -1)
    if base_pred.shape != actuals.shape:
        raise ValidationError("base predictions and actuals are not aligned")
    steps = base_pred.shape[1]
    X = np.column_stack([base_pred.reshape(-1), np.repeat(embeddings, steps, axis=0)])
    y = (actuals - base_pred).reshape(-1)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    net, xs, ys, history = fit_mlp_net(X, y, cfg.hidden, 0.0, cfg.lr, cfg.epochs,
                                       cfg.batch_size, rng)
    return AdapterModel(net, xs, ys, embeddings.shape[1], history)


# ---------------------------------------------------------------------------
# benchmark

def _embedding_rows(embeddings, ids):
    if embeddings is None:
        return np.zeros((len(ids), 0))
    index = {rid: i for i, rid in enumerate(embeddings.ids)}
    missing = [r for r in ids if r not in index]
    if missing:
        raise JoinError(f"{len(missing)} regions lack embeddings: {missing[:5]}", missing)
    return embeddings.values[[index[r] for r in ids]]


def run_forecast_benchmark(panel: SeriesPanel, split: ThreePartSplit, embeddings=None,
                           base_spec: ForecasterSpec = ForecasterSpec(),
                           arima_order=(1, 1, 1), adapter_cfg: AdapterConfig = AdapterConfig(),
                           m_comparisons=1, external=None):
    """Score base(t), ARIMA(t), base(t-1) and base(t-1)+adapter by MAPE.

    ``external`` optionally maps ``"t"``/``"t-1"`` to ``{region: forecast}``
    and replaces the base forecaster.  Regions where any method cannot be
    computed are dropped from every method.
    """
    (_, a), (_, b), (_, c) = split.part1, split.part2, split.part3
    if c > panel.n_steps:
        raise ValidationError(f"split ends at {c} but series have {panel.n_steps} steps")
    rows, dropped = [], {}
    fc_t, fc_arima, fc_prev = [], [], []
    for i, rid in enumerate(panel.ids):
        y = panel.values[i]
        if not panel.valid[i] or not np.all(np.isfinite(y[:c])):
            dropped[rid] = "missing values"
            continue
        if np.any(np.abs(y[b:c]) < 1e-9):
            dropped[rid] = "near-zero actuals"
            continue
        try:
            if external is not None:
                f_t = np.asarray(external["t"][rid], dtype=np.float64)[: c - b]
                f_prev = np.asarray(external["t-1"][rid], dtype=np.float64)[: c - a]
            else:
                f_t = base_forecast(y[:b], base_spec, c - b)
                f_prev = base_forecast(y[:a], base_spec, c - a)
            f_ar = arima_forecast(arima_fit(y[:b], *arima_order), c - b)
        except (ForecastError, FitError, KeyError) as exc:
            dropped[rid] = str(exc)
            continue
        if not (np.all(np.isfinite(f_t)) and np.all(np.isfinite(f_prev)) and np.all(np.isfinite(f_ar))):
            dropped[rid] = "non-finite forecast"
            continue
        rows.append(i)
        fc_t.append(f_t)
        fc_arima.append(f_ar)
        fc_prev.append(f_prev)
    if len(rows) < 2:
        raise ValidationError(f"{panel.task}: fewer than two usable regions")
    ids = [panel.ids[i] for i in rows]
    Y = panel.values[rows]
    fc_t, fc_arima, fc_prev = np.array(fc_t), np.array(fc_arima), np.array(fc_prev)
    emb = _embedding_rows(embeddings, ids)
    part2_len = b - a
    adapter = train_adapter(fc_prev[:, :part2_len], emb, Y[:, a:b], adapter_cfg)
    steps3 = c - b
    prev3 = fc_prev[:, part2_len:]
    corrected = adapter.predict(prev3.reshape(-1), np.repeat(emb, steps3, axis=0)).reshape(-1, steps3)
    actual3 = Y[:, b:c]

    def region_ape(pred):
        return np.abs((actual3 - pred) / actual3).mean(axis=1)

    ape = {
        "base_t": region_ape(fc_t),
        "arima_t": region_ape(fc_arima),
        "base_t-1": region_ape(prev3),
        "base_t-1+adapter": region_ape(corrected),
    }
    base_mape = float(ape["base_t"].mean())
    methods = {}
    for name, v in ape.items():
        m = float(v.mean())
        methods[name] = {"mape": m, "relative_to_base_t": (m - base_mape) / base_mape if base_mape else 0.0}
    test = metrics.paired_t_test(ape["arima_t"], ape["base_t-1+adapter"], m_comparisons)
    return {
        "task": panel.task,
        "n_regions": len(ids),
        "n_dropped": len(dropped),
        "split": {"part1": list(split.part1), "part2": list(split.part2), "part3": list(split.part3)},
        "methods": methods,
        "t_test_arima_vs_adapter": test.to_dict(),
        "region_ids": ids,
        "region_ape": {k: v.tolist() for k, v in ape.items()},
        "forecasts": {"base_t": fc_t, "arima_t": fc_arima, "base_t-1": prev3,
                      "base_t-1+adapter": corrected, "actual": actual3},
    }


def write_series_csv(panel, path):
    with open(path, "w", newline="\n") as fh:
        fh.write("region_id," + ",".join(f"t{j}" for j in range(panel.n_steps)) + "\n")
        for rid, row in zip(panel.ids, panel.values):
            fh.write(rid + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_series_csv(path, task, frequency="monthly", period=12):
    ids, rows = [], []
    with open(path) as fh:
        header = next(fh).rstrip("\n").split(",")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ids.append(parts[0])
            rows.append([float(v) if v not in ("", "nan", "NaN") else np.nan for v in parts[1:]])
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    return SeriesPanel(task, tuple(ids), values, frequency, period)


def read_external_forecasts(path):
    """``region_id,anchor,f0,f1,...`` rows with anchor ``t`` or ``t-1``."""
    out = {"t": {}, "t-1": {}}
    with open(path) as fh:
        next(fh)
        for line in fh:
            parts = line.rstrip("\n").split(",")
            if parts[1] not in out:
                raise ValidationError(f"unknown forecast anchor {parts[1]!r}")
            out[parts[1]][parts[0]] = np.array([float(v) for v in parts[2:] if v != ""])
    return out
