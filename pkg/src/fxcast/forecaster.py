"""Bidirectional recurrent forecaster with dot-product attention.

The forward pass: a forward and a backward gated recurrent (LSTM-style) cell
produce per-timestep output states; attention scores are plain dot products
between the final hidden state and each output state, softmax-normalised into
weights; their weighted sum (the context) runs through one post-attention
recurrent step seeded with the final hidden state; that step's output,
concatenated with the final hidden state, feeds a linear head producing one
scalar. Gradients come from the in-package reverse-mode engine and are
finite-difference-checked in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import metrics
from .autodiff import Tensor, concat
from .errors import (
    NonFiniteActivation,
    NonFiniteGradient,
    ShapeMismatch,
    TrainingDiverged,
)
from .features import MinMaxScaler, SampleSet, stable_seed


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and training knobs; the seed pins initialisation and shuffling."""

    n_features: int
    input_len_bars: int
    hidden_size: int = 32
    learning_rate: float = 0.1
    epochs: int = 35
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 5.0
    scaled_attention: bool = False

    def __post_init__(self):
        for name in ("n_features", "input_len_bars", "hidden_size", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) for every parameter, in canonical draw order."""
    f, h = config.n_features, config.hidden_size
    return [
        ("wx_f", (f, 4 * h), f),
        ("wh_f", (h, 4 * h), h),
        ("b_f", (4 * h,), h),
        ("wx_b", (f, 4 * h), f),
        ("wh_b", (h, 4 * h), h),
        ("b_b", (4 * h,), h),
        ("wx_p", (2 * h, 8 * h), 2 * h),
        ("wh_p", (2 * h, 8 * h), 2 * h),
        ("b_p", (8 * h,), 2 * h),
        ("w_out", (4 * h, 1), 4 * h),
        ("b_out", (1,), 4 * h),
    ]


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_shapes(config))


@dataclass
class ForwardTrace:
    """Intermediate states of one forward pass on a single window."""

    outputs: np.ndarray             # [input_len, 2*hidden] per-timestep states
    final_hidden: np.ndarray        # [2*hidden]
    attention_weights: np.ndarray   # [input_len], non-negative, sums to 1
    context: np.ndarray             # [2*hidden]
    prediction: float


class AttentionForecaster:
    """The forecaster itself; parameters are seeded-uniform, 1/sqrt(fan_in) scaled."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        for name, shape, fan_in in _param_shapes(config):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[name] = Tensor(
                rng.uniform(-bound, bound, size=shape), requires_grad=True
            )

    # --- forward graph ---

    def _cell(self, x: Tensor, h: Tensor, c: Tensor, wx: Tensor, wh: Tensor,
              b: Tensor, hidden: int) -> tuple[Tensor, Tensor]:
        z = x @ wx + h @ wh + b
        i = z[:, :hidden].sigmoid()
        f = z[:, hidden : 2 * hidden].sigmoid()
        g = z[:, 2 * hidden : 3 * hidden].tanh()
        o = z[:, 3 * hidden :].sigmoid()
        c_new = f * c + i * g
        h_new = o * c_new.tanh()
        return h_new, c_new

    def _graph(self, windows: np.ndarray) -> dict:
        """Build the full computation graph for a [batch, input_len, features] array."""
        cfg = self.config
        if windows.ndim != 3 or windows.shape[1:] != (cfg.input_len_bars, cfg.n_features):
            raise ShapeMismatch(
                f"window batch shape {windows.shape} does not match "
                f"(*, {cfg.input_len_bars}, {cfg.n_features})"
            )
        p = self.params
        batch, steps, _ = windows.shape
        h_size = cfg.hidden_size
        xs = [Tensor(windows[:, t, :]) for t in range(steps)]
        zero = Tensor(np.zeros((batch, h_size)))

        h, c = zero, zero
        forward_states = []
        for t in range(steps):
            h, c = self._cell(xs[t], h, c, p["wx_f"], p["wh_f"], p["b_f"], h_size)
            forward_states.append(h)
        forward_last = h

        h, c = zero, zero
        backward_states: list[Optional[Tensor]] = [None] * steps
        for t in reversed(range(steps)):
            h, c = self._cell(xs[t], h, c, p["wx_b"], p["wh_b"], p["b_b"], h_size)
            backward_states[t] = h
        backward_last = h

        outputs = [concat([forward_states[t], backward_states[t]], axis=1) for t in range(steps)]
        h_final = concat([forward_last, backward_last], axis=1)  # [B, 2H]

        scores = concat(
            [(h_final * outputs[t]).sum(axis=1, keepdims=True) for t in range(steps)], axis=1
        )  # [B, T]
        if cfg.scaled_attention:
            scores = scores * (1.0 / math.sqrt(2 * h_size))
        weights = scores.softmax(axis=1)

        context = weights[:, 0:1] * outputs[0]
        for t in range(1, steps):
            context = context + weights[:, t : t + 1] * outputs[t]

        post_zero = Tensor(np.zeros((batch, 2 * h_size)))
        h_post, _ = self._cell(context, h_final, post_zero, p["wx_p"], p["wh_p"],
                               p["b_p"], 2 * h_size)
        combined = concat([h_post, h_final], axis=1)  # [B, 4H]
        prediction = combined @ p["w_out"] + p["b_out"]  # [B, 1]
        return {
            "outputs": outputs,
            "h_final": h_final,
            "weights": weights,
            "context": context,
            "prediction": prediction,
        }

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Predictions (scaled units) for a [batch, input_len, features] array."""
        graph = self._graph(np.asarray(windows, dtype=np.float64))
        values = graph["prediction"].data.ravel()
        if not np.all(np.isfinite(values)):
            raise NonFiniteActivation("forward pass produced non-finite predictions")
        return values

    def fit(self, train_set: SampleSet, val_set: SampleSet | None = None):
        """sklearn-style wrapper around train(); records history_ and returns self."""
        self.history_ = train(self, train_set, val_set or train_set, self.config)
        return self

    def get_params(self, deep: bool = True) -> dict:
        return {"config": self.config}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, data in snapshot.items():
            self.params[name].data = data.copy()

    def to_dict(self) -> dict:
        return {
            "config": self.config.__dict__.copy(),
            "params": {name: t.data.tolist() for name, t in self.params.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AttentionForecaster":
        model = cls(ModelConfig(**payload["config"]))
        for name, values in payload["params"].items():
            model.params[name].data = np.array(values, dtype=np.float64)
        return model


def forward(model: AttentionForecaster, window: np.ndarray) -> ForwardTrace:
    """Run one window [input_len, features] and expose all intermediate states."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D window, got shape {window.shape}")
    graph = model._graph(window[None, :, :])
    outputs = np.stack([o.data[0] for o in graph["outputs"]])
    trace = ForwardTrace(
        outputs=outputs,
        final_hidden=graph["h_final"].data[0].copy(),
        attention_weights=graph["weights"].data[0].copy(),
        context=graph["context"].data[0].copy(),
        prediction=float(graph["prediction"].data[0, 0]),
    )
    if not (
        np.all(np.isfinite(trace.outputs))
        and np.all(np.isfinite(trace.attention_weights))
        and np.isfinite(trace.prediction)
    ):
        raise NonFiniteActivation("forward pass produced non-finite values")
    return trace


# the headline metric trio lives in metrics; re-exported here for callers
loss_mse = metrics.mse
loss_rmse = metrics.rmse
loss_mae = metrics.mae


def backward(
    model: AttentionForecaster, windows: np.ndarray, targets: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Analytic gradients of batch-mean MSE for every parameter.

    Returns (gradients keyed like model.params, per-sample squared errors).
    """
    windows = np.asarray(windows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    if len(targets) == 0:
        raise ValueError("empty batch")
    graph = model._graph(windows)
    diff = graph["prediction"] - Tensor(targets)
    loss = (diff * diff).mean()
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    for name, param in model.params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        grads[name] = grad
        param.grad = None
    return grads, (diff.data.ravel() ** 2)


@dataclass
class TrainingHistory:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self) -> str:
        lines = ["epoch,train_mse,val_mse"]
        for i, (tr, va) in enumerate(zip(self.train_mse, self.val_mse)):
            lines.append(f"{i},{tr!r},{va!r}")
        return "\n".join(lines) + "\n"


def train(
    model: AttentionForecaster,
    train_set: SampleSet,
    val_set: SampleSet,
    config: ModelConfig,
) -> TrainingHistory:
    """Seeded mini-batch gradient descent on MSE with best-validation checkpointing."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    rng = np.random.default_rng([config.seed, 0x5E0F])
    n = len(train_set)
    history = TrainingHistory()
    best_val = math.inf
    best_params = model.snapshot()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        squared_errors = np.empty(n)
        for start in range(0, n, config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            grads, batch_se = backward(
                model, train_set.windows[batch_idx], train_set.targets[batch_idx]
            )
            squared_errors[batch_idx] = batch_se
            _apply_update(model, grads, config)
        train_mse = float(squared_errors.mean())
        val_mse = metrics.mse(model.predict(val_set.windows), val_set.targets)
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        history.train_mse.append(train_mse)
        history.val_mse.append(val_mse)
        if val_mse < best_val:
            best_val = val_mse
            best_params = model.snapshot()
            history.best_epoch = epoch
    model.restore(best_params)
    return history


def _apply_update(model: AttentionForecaster, grads: dict[str, np.ndarray],
                  config: ModelConfig) -> None:
    if config.clip_norm:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > config.clip_norm:
            scale = config.clip_norm / total
            grads = {name: g * scale for name, g in grads.items()}
    for name, grad in grads.items():
        model.params[name].data = model.params[name].data - config.learning_rate * grad


@dataclass
class Forecast:
    """One routed price forecast for a decision bar."""

    predicted_high: float            # in price units
    cluster_id: int
    attention_weights: np.ndarray
    decision_time: object = None     # datetime of the decision bar
    entry_close: float = float("nan")


@dataclass
class ClusterEnsemble:
    """One trained forecaster per non-empty cluster plus routing metadata.

    ``feature_names`` describes the sample windows handed in; routing and
    prediction may each use their own subset of those columns, so clustering
    and forecasting can run on different indicator sets.
    """

    clusterer: object
    models: dict[int, AttentionForecaster]
    per_cluster_metrics: dict[int, dict]
    validation_metrics: dict
    feature_names: tuple[str, ...]
    cluster_feature_names: tuple[str, ...] | None = None
    prediction_feature_names: tuple[str, ...] | None = None
    warnings: list[str] = field(default_factory=list)
    histories: dict[int, TrainingHistory] = field(default_factory=dict)

    @property
    def validation_mae(self) -> float:
        return self.validation_metrics["mae"]

    def route(self, window: np.ndarray) -> int:
        flat = self._flatten_for_clustering(window[None, :, :])
        return int(self.clusterer.predict(flat)[0])

    def _slice(self, windows: np.ndarray, names) -> np.ndarray:
        if names is None:
            return windows
        idx = [self.feature_names.index(n) for n in names]
        return windows[:, :, idx]

    def _flatten_for_clustering(self, windows: np.ndarray) -> np.ndarray:
        return self._slice(windows, self.cluster_feature_names).reshape(len(windows), -1)

    def _model_windows(self, windows: np.ndarray) -> np.ndarray:
        return self._slice(windows, self.prediction_feature_names)

    def predict(self, window: np.ndarray, entry_close: float, scaler: MinMaxScaler,
                decision_time=None) -> Forecast:
        """Route one scaled window to its cluster model and invert to a price."""
        window = np.asarray(window, dtype=np.float64)
        cluster_id = self.route(window)
        model = self._model_for(cluster_id)
        trace = forward(model, self._model_windows(window[None, :, :])[0])
        price = float(scaler.invert_feature("high", np.array([trace.prediction]))[0])
        return Forecast(
            predicted_high=price,
            cluster_id=cluster_id,
            attention_weights=trace.attention_weights,
            decision_time=decision_time,
            entry_close=entry_close,
        )

    def _model_for(self, cluster_id: int) -> AttentionForecaster:
        if cluster_id in self.models:
            return self.models[cluster_id]
        # a cluster that was empty at training time routes to the largest trained one
        fallback = max(self.models, key=lambda cid: -self.per_cluster_metrics[cid]["size"])
        return self.models[fallback]

    def forecast_all(self, samples: SampleSet, scaler: MinMaxScaler) -> list[Forecast]:
        """Batched prediction over a SampleSet, one Forecast per sample."""
        if len(samples) == 0:
            return []
        labels = self.clusterer.predict(self._flatten_for_clustering(samples.windows))
        model_windows = self._model_windows(samples.windows)
        predictions = np.empty(len(samples))
        weights = [None] * len(samples)
        for cid in np.unique(labels):
            idx = np.flatnonzero(labels == cid)
            model = self._model_for(int(cid))
            graph = model._graph(model_windows[idx])
            predictions[idx] = graph["prediction"].data.ravel()
            for row, w in zip(idx, graph["weights"].data):
                weights[row] = w.copy()
        prices = scaler.invert_feature("high", predictions)
        return [
            Forecast(
                predicted_high=float(prices[i]),
                cluster_id=int(labels[i]),
                attention_weights=weights[i],
                decision_time=samples.timestamps[i],
                entry_close=float(samples.entry_closes[i]),
            )
            for i in range(len(samples))
        ]

    def to_dict(self) -> dict:
        return {
            "clusterer": self.clusterer.to_dict(),
            "models": {str(cid): m.to_dict() for cid, m in self.models.items()},
            "per_cluster_metrics": {str(c): m for c, m in self.per_cluster_metrics.items()},
            "validation_metrics": self.validation_metrics,
            "feature_names": list(self.feature_names),
            "cluster_feature_names": (
                list(self.cluster_feature_names) if self.cluster_feature_names else None
            ),
            "prediction_feature_names": (
                list(self.prediction_feature_names) if self.prediction_feature_names else None
            ),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ClusterEnsemble":
        from .clustering import load_clusterer

        return cls(
            clusterer=load_clusterer(payload["clusterer"]),
            models={
                int(cid): AttentionForecaster.from_dict(m)
                for cid, m in payload["models"].items()
            },
            per_cluster_metrics={
                int(c): m for c, m in payload["per_cluster_metrics"].items()
            },
            validation_metrics=payload["validation_metrics"],
            feature_names=tuple(payload["feature_names"]),
            cluster_feature_names=(
                tuple(payload["cluster_feature_names"])
                if payload.get("cluster_feature_names")
                else None
            ),
            prediction_feature_names=(
                tuple(payload["prediction_feature_names"])
                if payload.get("prediction_feature_names")
                else None
            ),
            warnings=list(payload.get("warnings", [])),
        )


def train_ensemble(
    samples: SampleSet,
    clusterer,
    config: ModelConfig,
    val_fraction: float = 0.2,
    cluster_feature_names=None,
    prediction_feature_names=None,
) -> ClusterEnsemble:
    """Route samples through a fitted clusterer and train one model per cluster.

    Per-cluster and pooled validation MSE/RMSE/MAE are recorded; empty
    clusters are skipped with a recorded warning. Routing uses
    ``cluster_feature_names`` and the models consume
    ``prediction_feature_names`` (either may be None for all columns), so the
    two can be different indicator sets.
    """
    ensemble = ClusterEnsemble(
        clusterer=clusterer,
        models={},
        per_cluster_metrics={},
        validation_metrics={},
        feature_names=samples.feature_names,
        cluster_feature_names=tuple(cluster_feature_names) if cluster_feature_names else None,
        prediction_feature_names=(
            tuple(prediction_feature_names) if prediction_feature_names else None
        ),
    )
    labels = clusterer.predict(ensemble._flatten_for_clustering(samples.windows))
    model_samples = (
        samples.select_features(prediction_feature_names)
        if prediction_feature_names
        else samples
    )
    n_clusters = len(clusterer.cluster_centers_)
    pooled_preds: list[np.ndarray] = []
    pooled_targets: list[np.ndarray] = []
    for cid in range(n_clusters):
        idx = np.flatnonzero(labels == cid)
        if idx.size == 0:
            ensemble.warnings.append(f"cluster {cid} received no samples; skipped")
            continue
        cluster_samples = model_samples.subset(idx)
        if len(cluster_samples) >= 2:
            n_val = max(1, int(len(cluster_samples) * val_fraction))
            train_ss = cluster_samples.subset(np.arange(len(cluster_samples) - n_val))
            val_ss = cluster_samples.subset(
                np.arange(len(cluster_samples) - n_val, len(cluster_samples))
            )
        else:
            train_ss = val_ss = cluster_samples
        model_config = replace(
            config,
            n_features=model_samples.windows.shape[2],
            input_len_bars=model_samples.input_len,
            seed=stable_seed(config.seed, "cluster", cid),
        )
        model = AttentionForecaster(model_config)
        history = train(model, train_ss, val_ss, model_config)
        preds = model.predict(val_ss.windows)
        cluster_eval = metrics.evaluate(preds, val_ss.targets)
        cluster_eval["size"] = int(idx.size)
        cluster_eval["n_val"] = len(val_ss)
        ensemble.models[cid] = model
        ensemble.per_cluster_metrics[cid] = cluster_eval
        ensemble.histories[cid] = history
        pooled_preds.append(preds)
        pooled_targets.append(val_ss.targets)
    if not ensemble.models:
        raise TrainingDiverged("no cluster received any samples")
    ensemble.validation_metrics = metrics.evaluate(
        np.concatenate(pooled_preds), np.concatenate(pooled_targets)
    )
    return ensemble
