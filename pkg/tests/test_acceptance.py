"""Acceptance suite: one test and one pass/fail line per criterion."""

import json
import math
import time
from collections import Counter, deque

import numpy as np
import pytest

from pdfmkit import baselines, bench, cli, downstream, metrics, nn, pdfm, sampling
from pdfmkit.downstream import MLP, RegressorSpec
from pdfmkit.pdfm import PdfmConfig
from pdfmkit.sampling import SamplerConfig

from conftest import random_graph, record_criterion
from test_metrics import ref_intra, ref_mape, ref_pearson, ref_r2
from test_pdfm import tiny_graph, tiny_model


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Two full desk-preset pipeline runs from the same configuration."""
    root = tmp_path_factory.mktemp("desk")
    times = []
    for name in ("run1", "run2"):
        t0 = time.perf_counter()
        code = cli.main(["pipeline", "--out", str(root / name)])
        times.append(time.perf_counter() - t0)
        assert code == 0
    return root, times


# ---------------------------------------------------------------------------

def test_ac01_gradient_correctness():
    t0 = time.perf_counter()
    errors = {}
    rng = np.random.default_rng(0)
    x, target = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    for act in ("gelu", "relu", "identity"):
        layer = nn.DenseLayer.glorot(4, 3, act, rng)
        layer.bias[:] = rng.normal(scale=0.3, size=3)

        def dense_closure(p, act=act):
            lay = nn.DenseLayer(p["weight"], p["bias"], act)
            out, cache = nn.dense_forward(lay, p["x"])
            loss, g = nn.huber_loss(out.reshape(-1), target.reshape(-1), 10.0)
            grads, dx = nn.dense_backward(lay, cache, g.reshape(out.shape))
            return loss, {**grads, "x": dx}

        errors[f"dense/{act}"] = nn.grad_check(dense_closure, {"weight": layer.weight, "bias": layer.bias, "x": x})

    net = MLP.create(3, (4, 3, 2), rng)
    for layer in net.layers:
        layer.bias[:] = rng.normal(scale=0.5, size=layer.bias.shape)
    xm, ym = rng.normal(size=(6, 3)), rng.normal(size=(6, 1))

    def mlp_closure(params):
        for k, v in params.items():
            i, name = k.split(".")
            setattr(net.layers[int(i[1:])], name, v)
        out, caches = net.forward(xm)
        loss, g = nn.squared_loss(out, ym)
        return loss, net.backward(caches, g)

    errors["mlp(4,3,2)"] = nn.grad_check(mlp_closure, dict(net.params))

    g = tiny_graph(8)
    for label, over in (("sum", {}), ("mean", {"pooling": "mean"}), ("shared", {"share_edge_transforms": True})):
        m = tiny_model(**over)
        xg, index = pdfm.node_matrix(g, m.cfg.sources)
        batch = pdfm.make_batch(index, [sampling.sample_subgraph(g, s) for s in g.ids[:8]], m.cfg.edge_sets)
        errors[f"pdfm/{label}"] = nn.grad_check(
            lambda p, m=m: pdfm.loss_and_grads(pdfm.PdfmModel(m.cfg, p), xg, batch), m.params)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-6 and elapsed < 30
    record_criterion(1, "gradient correctness", ok,
                     f"max rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")
    assert ok, errors


def test_ac02_partition_isolation(desk_training):
    worst = 0.0
    checked = 0
    for model in (desk_training.model, tiny_model()):
        D = model.cfg.embedding_dim
        e = np.random.default_rng(1).normal(size=D)
        base = pdfm.reconstruct(model, e)
        for s in model.cfg.sources:
            lo, hi = model.cfg.partitions[model.cfg.source_groups[s]]
            for j in [j for j in range(D) if not lo <= j < hi]:
                for h in (1e-4, 1.0):
                    bumped = e.copy()
                    bumped[j] += h
                    sens = np.max(np.abs(pdfm.reconstruct(model, bumped)[s] - base[s])) / h
                    worst = max(worst, sens)
                    checked += 1
    ok = worst == 0.0
    record_criterion(2, "partition isolation", ok, f"max out-of-partition sensitivity {worst} over {checked} probes")
    assert ok


def test_ac03_self_supervised_signal(desk_graph):
    t0 = time.perf_counter()
    res = pdfm.train_pdfm(desk_graph, PdfmConfig(epochs=30))
    elapsed = time.perf_counter() - t0
    h = res.history
    ratio = h[-1]["train_loss"] / h[0]["train_loss"]
    ok = len(desk_graph.ids) == 550 and ratio <= 0.5 and h[-1]["val_loss"] < h[0]["val_loss"] and elapsed < 300
    record_criterion(3, "self-supervised learning signal", ok,
                     f"train loss ratio {ratio:.3f}, val {h[0]['val_loss']:.4f} -> {h[-1]['val_loss']:.4f}, "
                     f"{elapsed:.0f}s")
    assert ok


def test_ac04_embeddings_vs_coordinates(desk_runs):
    root, _ = desk_runs
    res = json.loads((root / "run1/eval/results.json").read_text())["results"]
    gaps = {t: res[t]["pdfm_ridge"]["interpolation"]["r2"] - res[t]["idw"]["interpolation"]["r2"]
            for t in ("income", "night_lights")}
    idw_elev = res["elevation"]["idw"]["interpolation"]["r2"]
    ok = min(gaps.values()) >= 0.2 and idw_elev >= 0.6
    record_criterion(4, "embeddings beat coordinates where they should", ok,
                     "ridge-IDW R2 gap " + ", ".join(f"{t} {g:+.3f}" for t, g in gaps.items())
                     + f"; IDW elevation R2 {idw_elev:.3f}")
    assert ok


def test_ac05_split_protocol(desk_world, desk_embeddings):
    p2c = bench.map_postal_to_county(desk_world.regions)
    by_id = desk_world.region_by_id()
    p2s = {p: by_id[p].state for p in p2c}
    violations = 0
    for seed in range(1000):
        for split, groups in ((bench.make_interpolation_split(p2c, 0.2, seed), p2c),
                              (bench.make_extrapolation_split(p2s, 0.2, seed), p2s)):
            n_groups = len(set(groups.values()))
            held = set(split.holdout_groups)
            train = set(split.train) | set(split.validation)
            violations += abs(len(held) - math.floor(0.2 * n_groups)) > 1
            violations += set(split.test) != {p for p, g in groups.items() if g in held}
            violations += bool(train & set(split.test))
            violations += any(groups[p] in held for p in train)
    interp = bench.make_interpolation_split(p2c, 0.2, 0)
    inputs = bench.BenchInputs(desk_world.labels, {r.id: (r.lat, r.lon) for r in desk_world.regions},
                               {"pdfm": desk_embeddings}, p2c,
                               {"superres": bench.make_superres_split(interp, p2c)},
                               {"ridge": RegressorSpec("ridge"), "mlp": RegressorSpec("mlp", mlp_epochs=3)})
    postal = set(p2c)
    touched = 0
    for method in (bench.MethodSpec("idw", "coords", "idw"), bench.MethodSpec("r", "pdfm", "ridge"),
                   bench.MethodSpec("m", "pdfm", "mlp")):
        for task in desk_world.labels:
            _, _, views = bench.run_cell(inputs, task, method, "superres")
            touched += len(views["train"] & postal)
    # a postal read through the training view is refused outright
    view = bench.LabelView(desk_world.labels, inputs.splits["superres"].train, "train")
    try:
        view.get("income", [interp.train[0]])
        refused = False
    except Exception as exc:
        refused = type(exc).__name__ == "LeakageError"
    ok = violations == 0 and touched == 0 and refused
    record_criterion(5, "split protocol fidelity", ok,
                     f"{violations} violations over 2000 splits; superres postal label reads {touched}")
    assert ok


def test_ac06_metric_oracles():
    rng = np.random.default_rng(6)
    worst = 0.0
    negative_seen = False
    for _ in range(1000):
        n = int(rng.integers(3, 50))
        y = rng.normal(5, 2, n)
        p = y + rng.normal(0, rng.uniform(0.1, 6), n)
        c = rng.integers(0, 4, n).astype(str)
        r2 = metrics.r_squared(y, p)
        negative_seen |= r2 < 0
        worst = max(worst, abs(r2 - ref_r2(y, p)), abs(metrics.pearson_r(y, p) - ref_pearson(y, p)),
                    abs(metrics.mape(y, p) - ref_mape(y, p)))
        try:
            ic = metrics.intra_county_pearson(y, p, c).value
        except Exception:
            continue
        worst = max(worst, abs(ic - ref_intra(y, p, c)))
    ok = worst < 1e-12 and negative_seen and metrics.r_squared([1, 2, 3], [3, 2, 1]) == -3.0
    record_criterion(6, "metric oracles", ok, f"max abs deviation {worst:.1e} on 1000 instances")
    assert ok


def test_ac07_idw_exactness_and_convexity():
    rng = np.random.default_rng(7)
    failures = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        pts = np.column_stack([rng.uniform(25, 49, n), rng.uniform(-125, -67, n)])
        vals = rng.normal(size=n) * rng.uniform(0.1, 100)
        model = baselines.idw_fit(pts, vals, rng.uniform(0.5, 4), int(rng.integers(1, 33)))
        i = int(rng.integers(n))
        q = np.vstack([pts[i], [rng.uniform(25, 49), rng.uniform(-125, -67)]])
        pred = baselines.idw_predict(model, q)
        failures += pred[0] != vals[np.all(pts == pts[i], axis=1)].mean()
        nb = vals[baselines.idw_neighbors(model, q[1:])[0]]
        failures += not (nb.min() - 1e-12 * max(1, abs(nb).max()) <= pred[1] <= nb.max() + 1e-12 * max(1, abs(nb).max()))
    ok = failures == 0
    record_criterion(7, "IDW exactness and convexity", ok, f"{failures} failures in 10^4 trials")
    assert ok


def test_ac08_gbdt_contract():
    x = np.sort(np.random.default_rng(0).uniform(-1, 1, 200))
    X, y = x[:, None], (x >= 0).astype(float)
    step = downstream.gbdt_fit(X, y, spec=RegressorSpec("gbdt", gbdt_max_trees=50, gbdt_lr=0.1, gbdt_patience=None))
    step_mse = float(np.mean((step.predict(X) - y) ** 2))
    rng = np.random.default_rng(8)
    Xr = rng.normal(size=(2000, 6))
    yr = np.sin(2 * Xr[:, 0]) + Xr[:, 1] * Xr[:, 2] + 0.2 * rng.normal(size=2000)
    rich = downstream.gbdt_fit(Xr, yr, spec=RegressorSpec("gbdt", gbdt_max_trees=100, gbdt_patience=None))
    trees = step.params["trees"] + rich.params["trees"]
    min_leaf = min(int(t.count[t.feature < 0].min()) for t in trees)
    max_leaves = max(t.n_leaves for t in trees)
    monotone = all(np.all(np.diff(m.params["train_loss"]) <= 1e-12) for m in (step, rich))
    ok = monotone and min_leaf >= 40 and max_leaves <= 31 and step_mse < 0.01
    record_criterion(8, "GBDT contract", ok, f"step MSE {step_mse:.2e} after 50 trees, min leaf {min_leaf}, "
                     f"max leaves {max_leaves}, loss monotone {monotone}")
    assert ok


def _bfs(adj, start, limit=None):
    dist = {start: 0}
    q = deque([start])
    while q:
        v = q.popleft()
        if limit is not None and dist[v] == limit:
            continue
        for u in adj.get(v, ()):
            if u not in dist:
                dist[u] = dist[v] + 1
                q.append(u)
    return dist


def test_ac09_sampler():
    n_sub = 0
    bad = 0
    for gseed in range(250):
        g = random_graph(gseed, 40)
        full_adj = {}
        for name in g.edge_set_names:
            for rid in g.ids:
                full_adj.setdefault(rid, set()).update(g.neighbors(rid, name)[0])
        cfg = SamplerConfig(fanout={"prox_postal": 2, "similarity": 3}, seed=gseed)
        for sid in g.ids:
            sg = sampling.sample_subgraph(g, sid, cfg)
            n_sub += 1
            bad += max(sg.hops) > 4
            per = Counter((d, e) for _, d, e in sg.edges())
            bad += any(c > cfg.fanout_for(e) for (_, e), c in per.items())
            adj = {}
            for s, d, _ in sg.edges():
                adj.setdefault(d, set()).add(s)
            bad += _bfs(adj, sid) != sg.hop_of()
            truth = _bfs(full_adj, sid)
            bad += any(h < truth[v] for v, h in sg.hop_of().items())
            bad += sampling.sample_subgraph(g, sid, cfg) != sg
        if gseed < 5:
            wide = SamplerConfig(fanout=100, weighting="uniform")
            for sid in g.ids:
                bad += sampling.sample_subgraph(g, sid, wide).hop_of() != _bfs(full_adj, sid, 4)
    ok = bad == 0 and n_sub >= 10_000
    record_criterion(9, "sampler invariants", ok, f"{bad} violations over {n_sub} subgraphs")
    assert ok


def _sign_flip_p(d, n_flips=200_000, seed=0):
    t_obs = abs(d.mean() / (d.std(ddof=1) / math.sqrt(len(d))))
    if not math.isfinite(t_obs):
        return 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, n_flips, 20_000):
        x = rng.choice([-1.0, 1.0], size=(20_000, len(d))) * d
        t = x.mean(1) / (x.std(1, ddof=1) / math.sqrt(len(d)))
        hits += int(np.sum(np.abs(t) >= t_obs - 1e-12))
    return hits / n_flips


def test_ac10_forecast_adapter_value(desk_runs):
    root, _ = desk_runs
    fc = json.loads((root / "run1/forecast/forecast.json").read_text())
    details, ok = [], True
    for task in ("unemployment", "poverty"):
        m = fc[task]["methods"]
        gain = 1 - m["base_t-1+adapter"]["mape"] / m["base_t-1"]["mape"]
        ape = {k: np.array(v) for k, v in fc[task]["region_ape"].items()}
        pairs = [("arima_t", "base_t-1+adapter")]
        if task == "unemployment":
            pairs.append(("base_t", "base_t-1+adapter"))
        gaps = []
        for a, b in pairs:
            p_t = metrics.paired_t_test(ape[a], ape[b]).p
            gaps.append(abs(p_t - _sign_flip_p(ape[a] - ape[b])))
        reported = fc[task]["t_test_arima_vs_adapter"]["p"]
        gaps.append(abs(reported - metrics.paired_t_test(ape["arima_t"], ape["base_t-1+adapter"]).p))
        ok &= gain >= 0.10 and max(gaps) <= 0.005
        details.append(f"{task} gain {gain:.1%} max |p - p_perm| {max(gaps):.4f}")
    record_criterion(10, "forecast adapter value", ok, "; ".join(details))
    assert ok


def test_ac11_end_to_end_determinism(desk_runs):
    root, times = desk_runs
    a = (root / "run1/report/report.json").read_bytes()
    b = (root / "run2/report/report.json").read_bytes()
    ok = a == b and max(times) < 900
    record_criterion(11, "end-to-end determinism", ok,
                     f"report.json identical={a == b}, wall times {times[0]:.0f}s / {times[1]:.0f}s")
    assert ok
