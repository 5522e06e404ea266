"""Forecaster: forward-pass oracle replay, gradient checks, training behavior,
and per-cluster ensembles."""

import json
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from fxcast.clustering import KMeans
from fxcast.errors import ShapeMismatch
from fxcast.features import MinMaxScaler, SampleSet
from fxcast.forecaster import (
    AttentionForecaster,
    ModelConfig,
    backward,
    forward,
    loss_mae,
    loss_mse,
    loss_rmse,
    parameter_count,
    train,
    train_ensemble,
    _apply_update,
)

T0 = datetime(2021, 3, 1, tzinfo=timezone.utc)


def tiny_config(**kwargs):
    defaults = dict(n_features=3, input_len_bars=5, hidden_size=4, seed=0,
                    learning_rate=0.3, epochs=10, batch_size=8)
    defaults.update(kwargs)
    return ModelConfig(**defaults)


def make_sample_set(windows, targets):
    windows = np.asarray(windows, dtype=np.float64)
    n = len(windows)
    return SampleSet(
        windows=windows,
        targets=np.asarray(targets, dtype=np.float64),
        entry_closes=np.full(n, 0.7),
        timestamps=tuple(T0 + timedelta(minutes=15 * i) for i in range(n)),
        feature_names=tuple(f"f{i}" for i in range(windows.shape[2])),
        input_len=windows.shape[1],
        horizon=4,
    )


def random_samples(n, t, f, seed, target_fn=None):
    rng = np.random.default_rng(seed)
    windows = rng.uniform(0, 1, size=(n, t, f))
    if target_fn is None:
        targets = rng.uniform(0, 1, size=n)
    else:
        targets = np.array([target_fn(w) for w in windows])
    return make_sample_set(windows, targets)


class TestInit:
    def test_same_seed_identical(self):
        a = AttentionForecaster(tiny_config(seed=5))
        b = AttentionForecaster(tiny_config(seed=5))
        for name in a.params:
            assert np.array_equal(a.params[name].data, b.params[name].data)

    def test_different_seeds_differ(self):
        a = AttentionForecaster(tiny_config(seed=5))
        b = AttentionForecaster(tiny_config(seed=6))
        assert any(
            not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params
        )

    def test_parameter_count_closed_form(self):
        h, f = 8, 6
        config = tiny_config(hidden_size=h, n_features=f)
        # two directional cells, the post-attention cell (width 2h), linear head
        cells = 2 * (f * 4 * h + h * 4 * h + 4 * h)
        post = 2 * h * 8 * h + 2 * h * 8 * h + 8 * h
        head = 4 * h + 1
        expected = cells + post + head
        assert parameter_count(config) == expected
        model = AttentionForecaster(config)
        assert sum(p.data.size for p in model.params.values()) == expected

    def test_bounds_scale_with_fan_in(self):
        model = AttentionForecaster(tiny_config(hidden_size=16, n_features=4))
        assert np.abs(model.params["wx_f"].data).max() <= 1 / np.sqrt(4)
        assert np.abs(model.params["wh_f"].data).max() <= 1 / np.sqrt(16)


class TestForward:
    def test_attention_weights_sum_to_one(self):
        model = AttentionForecaster(tiny_config())
        rng = np.random.default_rng(1)
        for _ in range(20):
            trace = forward(model, rng.uniform(0, 1, size=(5, 3)))
            assert trace.attention_weights.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(trace.attention_weights >= 0)

    def test_single_timestep_degenerates(self):
        model = AttentionForecaster(tiny_config(input_len_bars=1))
        trace = forward(model, np.random.default_rng(2).uniform(size=(1, 3)))
        assert trace.attention_weights.shape == (1,)
        assert trace.attention_weights[0] == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(trace.context, trace.outputs[0])

    def test_shape_mismatch(self):
        model = AttentionForecaster(tiny_config())
        with pytest.raises(ShapeMismatch):
            forward(model, np.zeros((4, 3)))

    def test_hand_replay_tiny_model(self):
        """Independent numpy replay of the four attention steps."""
        config = tiny_config(n_features=2, input_len_bars=3, hidden_size=2, seed=9)
        model = AttentionForecaster(config)
        p = {k: t.data for k, t in model.params.items()}
        window = np.array([[0.1, 0.9], [0.4, 0.2], [0.8, 0.5]])
        h = 2

        def sigmoid(x):
            return 1.0 / (1.0 + np.exp(-x))

        def cell(x, hidden, c, wx, wh, b, width):
            z = x @ wx + hidden @ wh + b
            i = sigmoid(z[:width])
            fg = sigmoid(z[width : 2 * width])
            g = np.tanh(z[2 * width : 3 * width])
            o = sigmoid(z[3 * width :])
            c2 = fg * c + i * g
            return o * np.tanh(c2), c2

        hf, cf = np.zeros(h), np.zeros(h)
        fwd = []
        for t in range(3):
            hf, cf = cell(window[t], hf, cf, p["wx_f"], p["wh_f"], p["b_f"], h)
            fwd.append(hf)
        hb, cb = np.zeros(h), np.zeros(h)
        bwd = [None] * 3
        for t in (2, 1, 0):
            hb, cb = cell(window[t], hb, cb, p["wx_b"], p["wh_b"], p["b_b"], h)
            bwd[t] = hb
        outputs = [np.concatenate([fwd[t], bwd[t]]) for t in range(3)]
        h_final = np.concatenate([fwd[2], bwd[0]])
        scores = np.array([h_final @ o for o in outputs])
        exp = np.exp(scores - scores.max())
        weights = exp / exp.sum()
        context = sum(w * o for w, o in zip(weights, outputs))
        h_post, _ = cell(context, h_final, np.zeros(2 * h),
                         p["wx_p"], p["wh_p"], p["b_p"], 2 * h)
        combined = np.concatenate([h_post, h_final])
        expected = combined @ p["w_out"].ravel() + p["b_out"][0]

        trace = forward(model, window)
        assert trace.prediction == pytest.approx(expected, abs=1e-12)
        assert np.allclose(trace.attention_weights, weights, atol=1e-12)
        assert np.allclose(trace.context, context, atol=1e-12)


class TestLoss:
    def test_zero_when_equal(self):
        assert loss_mse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_values(self):
        assert loss_mse([0.0, 0.0], [1.0, 3.0]) == 5.0
        assert loss_rmse([0.0, 0.0], [1.0, 3.0]) == pytest.approx(np.sqrt(5.0))
        assert loss_mae([0.0, 0.0], [1.0, 3.0]) == 2.0

    def test_single_pair(self):
        assert loss_mse([2.0], [5.0]) == 9.0

    def test_length_mismatch(self):
        from fxcast.errors import LengthMismatch

        with pytest.raises(LengthMismatch):
            loss_mse([1.0], [1.0, 2.0])


class TestBackward:
    def test_zero_error_batch_zero_gradients(self):
        model = AttentionForecaster(tiny_config())
        rng = np.random.default_rng(3)
        windows = rng.uniform(size=(4, 5, 3))
        targets = model.predict(windows)  # exact fit by construction
        grads, se = backward(model, windows, targets)
        assert np.all(se == 0.0)
        for grad in grads.values():
            assert np.all(grad == 0.0)

    def test_gradcheck_against_finite_differences(self):
        eps = 1e-5
        for draw in range(2):
            config = tiny_config(seed=100 + draw)
            model = AttentionForecaster(config)
            rng = np.random.default_rng(draw)
            windows = rng.uniform(size=(3, 5, 3))
            targets = rng.uniform(size=3)
            grads, _ = backward(model, windows, targets)

            def loss():
                return float(np.mean((model.predict(windows) - targets) ** 2))

            for name, param in model.params.items():
                flat = param.data.ravel()
                analytic = grads[name].ravel()
                for i in range(0, flat.size, max(1, flat.size // 12)):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = loss()
                    flat[i] = orig - eps
                    down = loss()
                    flat[i] = orig
                    numeric = (up - down) / (2 * eps)
                    denom = max(abs(analytic[i]), abs(numeric), 1e-6)
                    assert abs(analytic[i] - numeric) / denom < 1e-4

    def test_head_bias_gradient_closed_form(self):
        model = AttentionForecaster(tiny_config(seed=8))
        rng = np.random.default_rng(8)
        windows = rng.uniform(size=(6, 5, 3))
        targets = rng.uniform(size=6)
        predictions = model.predict(windows)
        grads, _ = backward(model, windows, targets)
        expected = 2.0 * np.mean(predictions - targets)
        assert grads["b_out"][0] == pytest.approx(expected, rel=1e-10)


class TestTrain:
    def test_constant_target_converges(self):
        samples = random_samples(40, 5, 3, seed=4)
        samples.targets[:] = 0.55
        config = tiny_config(epochs=35, learning_rate=0.3)
        model = AttentionForecaster(config)
        history = train(model, samples, samples, config)
        assert history.val_mse[-1] < 1e-4

    def test_zero_learning_rate_flat(self):
        samples = random_samples(20, 5, 3, seed=5)
        config = tiny_config(learning_rate=0.0, epochs=5)
        model = AttentionForecaster(config)
        before = model.snapshot()
        history = train(model, samples, samples, config)
        for name, data in before.items():
            assert np.array_equal(model.params[name].data, data)
        assert len(set(history.train_mse)) == 1
        assert len(set(history.val_mse)) == 1

    def test_same_seed_identical_history(self):
        samples = random_samples(30, 5, 3, seed=6)
        config = tiny_config(epochs=6)
        h1 = train(AttentionForecaster(config), samples, samples, config)
        h2 = train(AttentionForecaster(config), samples, samples, config)
        assert h1.train_mse == h2.train_mse
        assert h1.val_mse == h2.val_mse

    def test_best_validation_checkpoint_restored(self):
        samples = random_samples(30, 5, 3, seed=7)
        val = random_samples(10, 5, 3, seed=8)
        config = tiny_config(epochs=12)
        model = AttentionForecaster(config)
        history = train(model, samples, val, config)
        restored_val = loss_mse(model.predict(val.windows), val.targets)
        assert restored_val == pytest.approx(min(history.val_mse), abs=1e-12)

    def test_overfit_one_sample(self):
        config = tiny_config(learning_rate=0.5)
        model = AttentionForecaster(config)
        rng = np.random.default_rng(9)
        window = rng.uniform(size=(1, 5, 3))
        target = np.array([0.42])
        for step in range(500):
            grads, se = backward(model, window, target)
            if se.mean() < 1e-6:
                break
            _apply_update(model, grads, config)
        assert se.mean() < 1e-6

    def test_history_csv(self):
        samples = random_samples(12, 5, 3, seed=10)
        config = tiny_config(epochs=2)
        history = train(AttentionForecaster(config), samples, samples, config)
        lines = history.to_csv().strip().split("\n")
        assert lines[0] == "epoch,train_mse,val_mse"
        assert len(lines) == 3


class TestPersistence:
    def test_roundtrip_bit_exact(self):
        config = tiny_config(seed=11)
        model = AttentionForecaster(config)
        samples = random_samples(16, 5, 3, seed=11)
        train(model, samples, samples, config)
        payload = json.loads(json.dumps(model.to_dict()))
        again = AttentionForecaster.from_dict(payload)
        for name in model.params:
            assert np.array_equal(again.params[name].data, model.params[name].data)
        rng = np.random.default_rng(12)
        probe = rng.uniform(size=(3, 5, 3))
        assert np.array_equal(again.predict(probe), model.predict(probe))


class TestShapeContract:
    def test_parameter_count_independent_of_input_len(self):
        short = tiny_config(input_len_bars=5)
        long = tiny_config(input_len_bars=9)
        assert parameter_count(short) == parameter_count(long)

    def test_attention_weight_count_tracks_input_len(self):
        for t in (2, 5, 9):
            model = AttentionForecaster(tiny_config(input_len_bars=t))
            trace = forward(model, np.random.default_rng(0).uniform(size=(t, 3)))
            assert trace.attention_weights.shape == (t,)


def two_regime_samples(n_per, seed):
    """Separable regimes with conflicting window-to-target maps."""
    rng = np.random.default_rng(seed)
    level_a = rng.uniform(0.1, 0.3, size=n_per)
    level_b = rng.uniform(0.7, 0.9, size=n_per)
    windows_a = np.repeat(level_a[:, None, None], 4, axis=1)
    windows_b = np.repeat(level_b[:, None, None], 4, axis=1)
    windows = np.concatenate([windows_a, windows_b])
    windows = np.repeat(windows, 2, axis=2)  # two identical features
    targets = np.concatenate([0.9 - level_a, level_b - 0.6])
    order = rng.permutation(2 * n_per)
    return make_sample_set(windows[order], targets[order])


class TestEnsemble:
    def test_k1_degenerates_to_single_model(self):
        samples = random_samples(30, 5, 3, seed=13)
        clusterer = KMeans(n_clusters=1, seed=0).fit(samples.flattened())
        config = tiny_config(epochs=3)
        ensemble = train_ensemble(samples, clusterer, config)
        assert list(ensemble.models) == [0]

    def test_empty_cluster_warning(self):
        samples = random_samples(20, 5, 3, seed=14)
        # centroids from a different, bimodal space: one sits far away
        flat = samples.flattened()
        clusterer = KMeans(n_clusters=2, seed=0).fit(
            np.vstack([flat, np.full((20, flat.shape[1]), 50.0)])
        )
        ensemble = train_ensemble(samples, clusterer, tiny_config(epochs=2))
        assert len(ensemble.models) == 1
        assert any("empty" in w or "no samples" in w for w in ensemble.warnings)

    def test_regime_split_beats_global_model(self):
        samples = two_regime_samples(60, seed=15)
        config = ModelConfig(
            n_features=2, input_len_bars=4, hidden_size=6,
            learning_rate=0.3, epochs=25, batch_size=16, seed=7,
        )
        flat = samples.flattened()
        split = train_ensemble(samples, KMeans(n_clusters=2, seed=1).fit(flat), config)
        pooled = train_ensemble(samples, KMeans(n_clusters=1, seed=1).fit(flat), config)
        assert split.validation_metrics["mse"] <= pooled.validation_metrics["mse"]

    def test_predict_inverts_scaling(self):
        scaler = MinMaxScaler(["high"])
        scaler.names_ = ["high"]
        scaler.min_ = np.array([0.70])
        scaler.max_ = np.array([0.72])
        assert scaler.invert_feature("high", np.array([0.5]))[0] == pytest.approx(0.71)

        samples = random_samples(20, 5, 3, seed=16)
        clusterer = KMeans(n_clusters=1, seed=0).fit(samples.flattened())
        ensemble = train_ensemble(samples, clusterer, tiny_config(epochs=2))
        scaled = ensemble.models[0].predict(samples.windows[:1])[0]
        forecastd = ensemble.predict(samples.windows[0], 0.7, scaler)
        assert forecastd.predicted_high == pytest.approx(0.70 + scaled * 0.02, rel=1e-12)

    def test_overfit_single_sample_prediction_matches_target(self):
        samples = random_samples(1, 5, 3, seed=17)
        clusterer = KMeans(n_clusters=1, seed=0).fit(samples.flattened())
        config = tiny_config(epochs=300, learning_rate=0.5, batch_size=1)
        ensemble = train_ensemble(samples, clusterer, config)
        pred = ensemble.models[0].predict(samples.windows)[0]
        assert abs(pred - samples.targets[0]) < 1e-3

    def test_windows_route_to_different_clusters(self):
        samples = two_regime_samples(20, seed=18)
        clusterer = KMeans(n_clusters=2, seed=3).fit(samples.flattened())
        ensemble = train_ensemble(samples, clusterer, tiny_config(
            n_features=2, input_len_bars=4, epochs=2))
        scaler = MinMaxScaler(["high"])
        scaler.names_ = ["high"]
        scaler.min_ = np.array([0.0])
        scaler.max_ = np.array([1.0])
        low = ensemble.predict(np.full((4, 2), 0.2), 0.7, scaler)
        high = ensemble.predict(np.full((4, 2), 0.8), 0.7, scaler)
        assert low.cluster_id != high.cluster_id

    def test_forecast_all_matches_single_predictions(self):
        samples = random_samples(12, 5, 3, seed=19)
        clusterer = KMeans(n_clusters=2, seed=4).fit(samples.flattened())
        ensemble = train_ensemble(samples, clusterer, tiny_config(epochs=2))
        scaler = MinMaxScaler(["high"])
        scaler.names_ = ["high"]
        scaler.min_ = np.array([0.6])
        scaler.max_ = np.array([0.8])
        batch = ensemble.forecast_all(samples, scaler)
        for i in (0, 5, 11):
            single = ensemble.predict(
                samples.windows[i], samples.entry_closes[i], scaler,
                samples.timestamps[i],
            )
            assert batch[i].predicted_high == pytest.approx(single.predicted_high, rel=1e-12)
            assert batch[i].cluster_id == single.cluster_id

    def test_separate_cluster_and_prediction_features(self):
        # three columns: models see f0/f1, routing sees only f2
        rng = np.random.default_rng(23)
        windows = rng.uniform(0, 1, size=(40, 5, 3))
        windows[:20, :, 2] = 0.1   # routing feature splits the data in two
        windows[20:, :, 2] = 0.9
        samples = make_sample_set(windows, rng.uniform(0, 1, size=40))
        clusterer = KMeans(n_clusters=2, seed=0).fit(samples.flattened(["f2"]))
        ensemble = train_ensemble(
            samples, clusterer, tiny_config(epochs=2),
            cluster_feature_names=["f2"], prediction_feature_names=["f0", "f1"],
        )
        assert len(ensemble.models) == 2
        for model in ensemble.models.values():
            assert model.config.n_features == 2
        scaler = MinMaxScaler(["high"])
        scaler.names_ = ["high"]
        scaler.min_ = np.array([0.0])
        scaler.max_ = np.array([1.0])
        low = ensemble.predict(windows[0], 0.7, scaler)
        high = ensemble.predict(windows[-1], 0.7, scaler)
        assert low.cluster_id != high.cluster_id
        batch = ensemble.forecast_all(samples, scaler)
        assert batch[0].cluster_id == low.cluster_id
        assert batch[0].predicted_high == pytest.approx(low.predicted_high, rel=1e-12)

    def test_scaled_attention_flag(self):
        base = tiny_config(seed=30)
        scaled = tiny_config(seed=30, scaled_attention=True)
        window = np.random.default_rng(30).uniform(size=(5, 3))
        plain_trace = forward(AttentionForecaster(base), window)
        scaled_trace = forward(AttentionForecaster(scaled), window)
        assert scaled_trace.attention_weights.sum() == pytest.approx(1.0, abs=1e-9)
        # same parameters, different score temperature -> different weights
        assert not np.allclose(plain_trace.attention_weights,
                               scaled_trace.attention_weights)

    def test_ensemble_roundtrip(self):
        samples = random_samples(15, 5, 3, seed=20)
        clusterer = KMeans(n_clusters=2, seed=5).fit(samples.flattened())
        ensemble = train_ensemble(samples, clusterer, tiny_config(epochs=2))
        from fxcast.forecaster import ClusterEnsemble

        again = ClusterEnsemble.from_dict(json.loads(json.dumps(ensemble.to_dict())))
        probe = samples.windows[:3]
        for cid, model in ensemble.models.items():
            assert np.array_equal(again.models[cid].predict(probe), model.predict(probe))
        assert again.validation_metrics == ensemble.validation_metrics
