import numpy as np
import pytest

from pdfmkit import forecast, pdfm
from pdfmkit.downstream import MLP
from pdfmkit.errors import FitError, ForecastError, JoinError, ValidationError
from pdfmkit.forecast import AdapterConfig, ForecasterSpec, SeriesPanel, ThreePartSplit


def simulate_arma(phi, theta, n, c=0.0, seed=0, burn=200):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=n + burn)
    y = np.zeros(n + burn)
    for t in range(1, n + burn):
        y[t] = c + phi * y[t - 1] + e[t] + theta * e[t - 1]
    return y[burn:]


class TestBaseForecast:
    def test_naive_last(self):
        np.testing.assert_array_equal(forecast.base_forecast([1, 4, 7], ForecasterSpec("naive_last"), 3), [7, 7, 7])

    def test_seasonal_naive(self):
        y = np.arange(30.0)
        out = forecast.base_forecast(y, ForecasterSpec("seasonal_naive", period=12), 14)
        np.testing.assert_array_equal(out[:12], y[-12:])
        np.testing.assert_array_equal(out[12:], y[-12:-10])

    def test_ar1_noiseless(self):
        y = 5.0 * 0.8 ** np.arange(40)
        out = forecast.base_forecast(y, ForecasterSpec("ar", order=(1, 0, 0)), 1)
        assert out[0] == pytest.approx(0.8 * y[-1], abs=1e-6)

    def test_insufficient_context(self):
        with pytest.raises(ForecastError):
            forecast.base_forecast(np.arange(5.0), ForecasterSpec("seasonal_naive", period=12), 2)
        with pytest.raises(ForecastError):
            forecast.base_forecast([1.0, 2.0], ForecasterSpec("naive_last"), 1)

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            ForecasterSpec("ar", order=(0, 1, 0))
        with pytest.raises(ValidationError):
            ForecasterSpec("prophet")


class TestArima:
    def test_linear_trend_random_walk_with_drift(self):
        y = 3.0 + 0.5 * np.arange(30)
        m = forecast.arima_fit(y, 0, 1, 0)
        np.testing.assert_allclose(forecast.arima_forecast(m, 3), y[-1] + 0.5 * np.arange(1, 4), atol=1e-10)

    def test_white_noise_mean(self):
        y = np.random.default_rng(0).normal(2.0, 1.0, 60)
        m = forecast.arima_fit(y, 0, 0, 0)
        np.testing.assert_allclose(forecast.arima_forecast(m, 4), y.mean(), atol=1e-12)

    def test_arma11_recovery(self):
        y = simulate_arma(0.6, 0.3, 2000, seed=42)
        m = forecast.arima_fit(y, 1, 0, 1)
        assert m.converged
        assert m.phi[0] == pytest.approx(0.6, abs=0.1)
        assert m.theta[0] == pytest.approx(0.3, abs=0.1)
        assert np.all(np.diff(m.objective_trace) <= 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_objective_non_increasing(self, seed):
        y = np.cumsum(simulate_arma(0.4, -0.5, 120, seed=seed))
        m = forecast.arima_fit(y, 1, 1, 1)
        assert np.all(np.diff(m.objective_trace) <= 0)
        assert np.all(np.abs(np.roots([1.0, *m.theta])) < 1) if m.theta[0] else True

    def test_hand_recursion(self):
        m = forecast.ArimaModel((2, 1, 1), 0.1, np.array([0.5, -0.2]), np.array([0.4]), 1.0,
                                w_tail=np.array([1.0, 2.0]), e_tail=np.array([0.3]), level_tails=[10.0])
        w1 = 0.1 + 0.5 * 2.0 - 0.2 * 1.0 + 0.4 * 0.3
        w2 = 0.1 + 0.5 * w1 - 0.2 * 2.0
        w3 = 0.1 + 0.5 * w2 - 0.2 * w1
        np.testing.assert_allclose(forecast.arima_forecast(m, 3),
                                   [10 + w1, 10 + w1 + w2, 10 + w1 + w2 + w3], rtol=1e-14)
        assert forecast.arima_forecast(m, 0).size == 0

    def test_too_short(self):
        with pytest.raises(FitError):
            forecast.arima_fit(np.arange(15.0), 1, 1, 1)

    def test_non_convergence_carries_trace(self):
        y = np.cumsum(simulate_arma(0.4, -0.5, 120, seed=1))
        with pytest.raises(FitError) as err:
            forecast.arima_fit(y, 1, 1, 1, tol=0.0, max_iter=2)
        assert len(err.value.trace) >= 2


class TestSplit:
    def test_from_lengths(self):
        s = ThreePartSplit.from_lengths(48, 12, 12)
        assert (s.part1, s.part2, s.part3) == ((0, 24), (24, 36), (36, 48))

    def test_invalid(self):
        with pytest.raises(ValidationError):
            ThreePartSplit((0, 5), (6, 8), (8, 10))
        with pytest.raises(ValidationError):
            ThreePartSplit((0, 0), (0, 8), (8, 10))


class TestAdapter:
    def test_zero_lr_is_init_output(self):
        rng = np.random.default_rng(0)
        base, emb, act = rng.normal(size=20), rng.normal(size=(20, 3)), rng.normal(size=20)
        cfg = AdapterConfig(lr=0.0, epochs=3)
        model = forecast.train_adapter(base, emb, act, cfg)
        net = MLP.create(4, (64, 32), np.random.default_rng(0))
        for k, v in net.params.items():
            np.testing.assert_array_equal(model.net.params[k], v)

    def test_near_identity(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(5, 10, size=(40, 3))
        emb = rng.normal(size=(40, 4))
        model = forecast.train_adapter(base, emb, base.copy())
        test = rng.uniform(5, 10, size=(40, 3))
        pred = model.predict(test.reshape(-1), np.repeat(emb, 3, axis=0)).reshape(40, 3)
        assert np.mean(np.abs(pred - test) / test) <= 0.02

    def test_reads_offset_from_embedding(self):
        rng = np.random.default_rng(2)
        offset = rng.normal(size=60)
        emb = np.column_stack([offset, rng.normal(size=60)])
        base = rng.uniform(5, 10, size=60)
        model = forecast.train_adapter(base, emb, base + offset, AdapterConfig(epochs=200))
        pred = model.predict(base, emb)
        assert np.mean((pred - base - offset) ** 2) < 0.1 * offset.var()

    def test_missing_embedding(self, desk_world):
        panel = desk_world.series["unemployment"]
        table = pdfm.EmbeddingTable(panel.ids[1:], np.zeros((len(panel.ids) - 1, 2)))
        with pytest.raises(JoinError):
            forecast.run_forecast_benchmark(panel, ThreePartSplit.from_lengths(48, 12, 12), table)


def _bench(world, table, task="unemployment"):
    from pdfmkit.config import build_config
    cfg = build_config({}, {})
    t, p = cfg.forecast.tasks[task], world.series[task]
    split = ThreePartSplit.from_lengths(p.n_steps, t.part2, t.part3)
    return forecast.run_forecast_benchmark(p, split, table, cfg.forecaster_spec(task, p.period),
                                           tuple(t.arima_order), cfg.adapter_config())


class TestBenchmark:
    @pytest.mark.parametrize("task", ["unemployment", "poverty"])
    def test_uninformative_embeddings(self, desk_world, desk_embeddings, task):
        none = _bench(desk_world, None, task)["methods"]
        zeros = _bench(desk_world, pdfm.EmbeddingTable(desk_embeddings.ids, np.zeros((550, 48))), task)["methods"]
        # calibration alone never costs more than 5 % relative to the raw base(t-1)
        assert none["base_t-1+adapter"]["mape"] <= 1.05 * none["base_t-1"]["mape"]
        assert zeros["base_t-1+adapter"]["mape"] == pytest.approx(none["base_t-1+adapter"]["mape"], rel=0.02)

    def test_embedding_adapter_helps(self, desk_world, desk_embeddings):
        res = _bench(desk_world, desk_embeddings)
        m = res["methods"]
        assert m["base_t-1+adapter"]["mape"] <= 0.9 * m["base_t-1"]["mape"]
        assert m["base_t-1+adapter"]["mape"] < m["arima_t"]["mape"]
        assert len(res["region_ape"]["arima_t"]) == len(res["region_ids"]) == res["n_regions"]

    def test_constant_series(self):
        panel = SeriesPanel("flat", ("a", "b", "c"), np.full((3, 48), 4.0))
        res = forecast.run_forecast_benchmark(panel, ThreePartSplit.from_lengths(48, 12, 12),
                                              arima_order=(1, 1, 0), adapter_cfg=AdapterConfig(epochs=5))
        for row in res["methods"].values():
            assert row["mape"] == pytest.approx(0.0, abs=1e-6)

    def test_missing_regions_dropped_symmetrically(self, desk_world):
        panel = desk_world.series["unemployment"]
        values = panel.values.copy()
        values[3, 40] = np.nan
        res = forecast.run_forecast_benchmark(SeriesPanel("u", panel.ids, values),
                                              ThreePartSplit.from_lengths(48, 12, 12),
                                              adapter_cfg=AdapterConfig(epochs=5))
        assert res["n_dropped"] == 1 and panel.ids[3] not in res["region_ids"]
        assert {len(v) for v in res["region_ape"].values()} == {49}

    def test_no_leakage_of_future_steps(self, desk_world):
        panel = desk_world.series["unemployment"]
        split = ThreePartSplit.from_lengths(48, 12, 12)
        cfg = AdapterConfig(epochs=5)
        a = forecast.run_forecast_benchmark(panel, split, adapter_cfg=cfg)
        tampered = panel.values.copy()
        tampered[:, 24:] += 100.0  # part2 and part3 shift; base(t-1) context untouched
        b = forecast.run_forecast_benchmark(SeriesPanel("u", panel.ids, tampered), split, adapter_cfg=cfg)
        np.testing.assert_array_equal(a["forecasts"]["base_t-1"], b["forecasts"]["base_t-1"])


def test_series_and_external_csv(tmp_path, desk_world):
    panel = desk_world.series["poverty"]
    forecast.write_series_csv(panel, tmp_path / "s.csv")
    back = forecast.read_series_csv(tmp_path / "s.csv", "poverty", "yearly", 1)
    assert back.ids == panel.ids and back.values.tobytes() == panel.values.tobytes()
    (tmp_path / "ext.csv").write_text("region_id,anchor,f0,f1\na,t,1.5,2.5\na,t-1,1.0,2.0\n")
    ext = forecast.read_external_forecasts(tmp_path / "ext.csv")
    np.testing.assert_array_equal(ext["t-1"]["a"], [1.0, 2.0])
    (tmp_path / "bad.csv").write_text("region_id,anchor,f0\na,t+1,1.0\n")
    with pytest.raises(ValidationError):
        forecast.read_external_forecasts(tmp_path / "bad.csv")
