"""Scaled, windowed training samples plus feature ranking and selection.

The scaler is fitted on training rows only (leakage guard); targets are the
maximum high over the forecast horizon, scaled with the high-price scaler so
model outputs invert back to prices.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .bars import format_timestamp, parse_timestamp
from .errors import (
    ConstantFeatureWarning,
    EmptyRange,
    InsufficientData,
    NotEnoughCandidates,
    TrainingDiverged,
)
from .indicators import EventMask, FeatureFrame


def stable_seed(*parts) -> int:
    """Derive a reproducible RNG seed from mixed parts (process-independent)."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class WindowSpec:
    """Input window and forecast horizon, in bars, plus the feature order."""

    input_len_bars: int
    horizon_bars: int
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if self.input_len_bars < 1 or self.horizon_bars < 1:
            raise ValueError("window and horizon must be at least one bar")
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @classmethod
    def from_minutes(
        cls, input_minutes: int, horizon_minutes: int, interval_minutes: int, feature_names
    ) -> "WindowSpec":
        """Build a spec from minute figures; they must sit exactly on the bar grid."""
        if input_minutes % interval_minutes or horizon_minutes % interval_minutes:
            raise ValueError(
                f"{input_minutes}/{horizon_minutes} min do not divide into "
                f"{interval_minutes}-min bars"
            )
        return cls(
            input_minutes // interval_minutes,
            horizon_minutes // interval_minutes,
            tuple(feature_names),
        )


class MinMaxScaler(BaseEstimator, TransformerMixin):
    """Per-feature min/max scaler to [0, 1], fitted on training rows only.

    Constant features emit ConstantFeatureWarning and map to 0.5. Values
    outside the fitted range scale past [0, 1] without clamping.
    """

    def __init__(self, feature_names=None):
        self.feature_names = feature_names

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise EmptyRange("scaler fit needs a non-empty 2-D array")
        names = self.feature_names or [f"f{i}" for i in range(X.shape[1])]
        if len(names) != X.shape[1]:
            raise ValueError("feature_names length does not match data width")
        if np.all(np.isnan(X), axis=0).any():
            bad = [n for n, dead in zip(names, np.all(np.isnan(X), axis=0)) if dead]
            raise EmptyRange(f"no defined values in fit range for {bad}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            self.min_ = np.nanmin(X, axis=0)
            self.max_ = np.nanmax(X, axis=0)
        self.names_ = list(names)
        constant = self.max_ == self.min_
        for name in np.asarray(self.names_)[constant]:
            warnings.warn(f"feature {name!r} is constant over the fit range",
                          ConstantFeatureWarning, stacklevel=2)
        return self

    def _check_fitted(self):
        if not hasattr(self, "min_"):
            raise NotFittedError("scaler is not fitted")

    def transform(self, X):
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        span = self.max_ - self.min_
        safe = np.where(span == 0.0, 1.0, span)
        out = (X - self.min_) / safe
        return np.where(span == 0.0, 0.5, out)

    def inverse_transform(self, X):
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        return X * (self.max_ - self.min_) + self.min_

    def index_of(self, name: str) -> int:
        self._check_fitted()
        try:
            return self.names_.index(name)
        except ValueError:
            raise KeyError(f"scaler has no feature {name!r}") from None

    def transform_feature(self, name: str, values):
        i = self.index_of(name)
        span = self.max_[i] - self.min_[i]
        if span == 0.0:
            return np.full_like(np.asarray(values, dtype=np.float64), 0.5)
        return (np.asarray(values, dtype=np.float64) - self.min_[i]) / span

    def invert_feature(self, name: str, values):
        i = self.index_of(name)
        return np.asarray(values, dtype=np.float64) * (self.max_[i] - self.min_[i]) + self.min_[i]

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "feature_names": self.names_,
            "min": self.min_.tolist(),
            "max": self.max_.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MinMaxScaler":
        scaler = cls(feature_names=list(payload["feature_names"]))
        scaler.names_ = list(payload["feature_names"])
        scaler.min_ = np.array(payload["min"], dtype=np.float64)
        scaler.max_ = np.array(payload["max"], dtype=np.float64)
        return scaler


def fit_scaler(frame: FeatureFrame, feature_names, train_range=None) -> MinMaxScaler:
    """Fit a MinMaxScaler on the given features over training rows only.

    ``train_range`` is a (start, stop) row range; None means all rows of the
    (already train-only) frame.
    """
    names = list(feature_names)
    matrix = frame.matrix(names)
    if train_range is not None:
        start, stop = train_range
        matrix = matrix[start:stop]
    if matrix.shape[0] == 0:
        raise EmptyRange("empty training range")
    return MinMaxScaler(feature_names=names).fit(matrix)


@dataclass
class SampleSet:
    """Fixed-length scaled input windows paired with scaled future-high targets."""

    windows: np.ndarray        # [n, input_len, n_features], scaled
    targets: np.ndarray        # [n], scaled max high over the horizon
    entry_closes: np.ndarray   # [n], unscaled close at window end
    timestamps: tuple          # window-end times
    feature_names: tuple[str, ...]
    input_len: int
    horizon: int

    def __len__(self) -> int:
        return len(self.targets)

    def flattened(self, feature_names=None) -> np.ndarray:
        """Windows flattened to [n, input_len * n_features] (optionally a feature subset)."""
        if feature_names is None:
            w = self.windows
        else:
            idx = [self.feature_names.index(n) for n in feature_names]
            w = self.windows[:, :, idx]
        return w.reshape(len(self), -1)

    def subset(self, indices) -> "SampleSet":
        indices = np.asarray(indices)
        return SampleSet(
            windows=self.windows[indices],
            targets=self.targets[indices],
            entry_closes=self.entry_closes[indices],
            timestamps=tuple(self.timestamps[i] for i in indices),
            feature_names=self.feature_names,
            input_len=self.input_len,
            horizon=self.horizon,
        )

    def select_features(self, feature_names) -> "SampleSet":
        """A view of the same samples restricted to the named feature columns."""
        idx = [self.feature_names.index(n) for n in feature_names]
        return SampleSet(
            windows=self.windows[:, :, idx],
            targets=self.targets,
            entry_closes=self.entry_closes,
            timestamps=self.timestamps,
            feature_names=tuple(feature_names),
            input_len=self.input_len,
            horizon=self.horizon,
        )

    def save_text(self) -> str:
        """Binary-free export: a JSON shape header then one line per sample."""
        header = {
            "n_samples": len(self),
            "input_len": self.input_len,
            "n_features": self.windows.shape[2] if len(self) else len(self.feature_names),
            "horizon_bars": self.horizon,
            "feature_names": list(self.feature_names),
        }
        out = io.StringIO()
        out.write(json.dumps(header) + "\n")
        for i in range(len(self)):
            flat = " ".join(repr(float(v)) for v in self.windows[i].ravel())
            out.write(
                f"{format_timestamp(self.timestamps[i])} "
                f"{float(self.entry_closes[i])!r} {float(self.targets[i])!r} {flat}\n"
            )
        return out.getvalue()

    @classmethod
    def load_text(cls, text: str) -> "SampleSet":
        lines = text.strip().split("\n")
        header = json.loads(lines[0])
        n, t, f = header["n_samples"], header["input_len"], header["n_features"]
        windows = np.zeros((n, t, f))
        targets = np.zeros(n)
        closes = np.zeros(n)
        stamps = []
        for i, line in enumerate(lines[1 : n + 1]):
            parts = line.split(" ")
            stamps.append(parse_timestamp(parts[0]))
            closes[i] = float(parts[1])
            targets[i] = float(parts[2])
            windows[i] = np.array([float(v) for v in parts[3:]]).reshape(t, f)
        return cls(
            windows=windows,
            targets=targets,
            entry_closes=closes,
            timestamps=tuple(stamps),
            feature_names=tuple(header["feature_names"]),
            input_len=t,
            horizon=header["horizon_bars"],
        )


def build_samples(
    frame: FeatureFrame,
    spec: WindowSpec,
    scaler: MinMaxScaler,
    event_mask: EventMask | None = None,
) -> SampleSet:
    """One sample per admissible window-end bar (optionally event-gated).

    The window covers the input_len bars ending at the decision bar; the
    target is the max high over the horizon bars strictly after it. The mask,
    when given, is evaluated at the decision bar.
    """
    names = list(spec.feature_names)
    n_bars = len(frame)
    t, h = spec.input_len_bars, spec.horizon_bars
    warmup = frame.warmup(names)
    first_end = warmup + t - 1
    last_end = n_bars - 1 - h
    if last_end < first_end:
        raise InsufficientData(
            f"{n_bars} bars cannot fit a {t}-bar window plus {h}-bar horizon "
            f"after {warmup} warmup bars"
        )
    ends = np.arange(first_end, last_end + 1)
    if event_mask is not None:
        if len(event_mask.flags) != n_bars:
            raise ValueError(
                f"event mask length {len(event_mask.flags)} != {n_bars} bars"
            )
        ends = ends[event_mask.flags[ends]]

    raw = frame.matrix(names)
    scaled = np.empty_like(raw)
    for j, name in enumerate(names):
        scaled[:, j] = scaler.transform_feature(name, raw[:, j])
    all_windows = sliding_window_view(scaled, t, axis=0)  # [n_bars-t+1, F, t]
    windows = all_windows[ends - t + 1].transpose(0, 2, 1).copy()
    if not np.all(np.isfinite(windows)):
        bad = sorted(
            names[j] for j in np.unique(np.argwhere(~np.isfinite(windows))[:, 2])
        )
        raise ValueError(
            f"windows contain undefined values in {bad} past their warmup"
        )

    highs = frame.values("high")
    future_high = sliding_window_view(highs, h)[1:].max(axis=-1)  # index e -> max high e+1..e+h
    targets_raw = future_high[ends] if len(ends) else np.empty(0)
    targets = scaler.transform_feature("high", targets_raw)

    closes = frame.values("close")
    return SampleSet(
        windows=windows,
        targets=np.asarray(targets, dtype=np.float64),
        entry_closes=closes[ends],
        timestamps=tuple(frame.timestamps[e] for e in ends),
        feature_names=tuple(names),
        input_len=t,
        horizon=h,
    )


@dataclass(frozen=True)
class RankingConfig:
    """Knobs for the one-candidate-at-a-time feature ranking loop."""

    epochs: int = 35
    tail: int = 10
    base_features: tuple[str, ...] = ("open", "close")
    input_len_bars: int = 9
    horizon_bars: int = 4
    val_fraction: float = 0.2
    hidden_size: int = 8
    learning_rate: float = 0.2
    batch_size: int = 32
    max_samples: int | None = None
    seed: int = 0


@dataclass
class FeatureRanking:
    """Candidates ordered by score (mean tail-epoch validation loss), best first."""

    entries: list[tuple[str, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def to_csv(self) -> str:
        lines = ["rank,feature,score"]
        for rank, (name, score) in enumerate(self.entries, start=1):
            lines.append(f"{rank},{name},{score!r}")
        return "\n".join(lines) + "\n"


def rank_features(frame: FeatureFrame, candidates, config: RankingConfig) -> FeatureRanking:
    """Score each candidate by training a small forecaster on base + candidate.

    The score is the mean validation MSE over the final ``tail`` epochs; lower
    is better. A diverging candidate scores +inf and ranks last. Fully
    reproducible for a fixed config seed.
    """
    from .forecaster import AttentionForecaster, ModelConfig, train

    candidates = list(candidates)
    if not candidates:
        raise NotEnoughCandidates("no candidates to rank")
    scores: list[tuple[str, float]] = []
    for name in candidates:
        names = list(config.base_features) + [name]
        scaler = fit_scaler(frame, names + ["high"])
        spec = WindowSpec(config.input_len_bars, config.horizon_bars, tuple(names))
        samples = build_samples(frame, spec, scaler)
        if config.max_samples is not None and len(samples) > config.max_samples:
            stride = len(samples) / config.max_samples
            keep = (np.arange(config.max_samples) * stride).astype(int)
            samples = samples.subset(keep)
        n_val = max(1, int(len(samples) * config.val_fraction))
        if len(samples) - n_val < 1:
            raise InsufficientData("not enough samples for a train/val split")
        train_set = samples.subset(np.arange(len(samples) - n_val))
        val_set = samples.subset(np.arange(len(samples) - n_val, len(samples)))
        model_config = ModelConfig(
            n_features=len(names),
            input_len_bars=config.input_len_bars,
            hidden_size=config.hidden_size,
            learning_rate=config.learning_rate,
            epochs=config.epochs,
            batch_size=config.batch_size,
            seed=stable_seed(config.seed, name),
        )
        model = AttentionForecaster(model_config)
        try:
            history = train(model, train_set, val_set, model_config)
            score = float(np.mean(history.val_mse[-config.tail:]))
        except TrainingDiverged:
            score = math.inf
        scores.append((name, score))
    scores.sort(key=lambda item: item[1])
    return FeatureRanking(entries=scores)


def select_top(ranking: FeatureRanking, k: int = 4) -> list[str]:
    """Top-k ranked features plus open and close, deduplicated, order stable."""
    if len(ranking) < k:
        raise NotEnoughCandidates(f"ranking has {len(ranking)} entries, need {k}")
    chosen = ranking.names[:k] + ["open", "close"]
    seen: set[str] = set()
    result = []
    for name in chosen:
        if name not in seen:
            seen.add(name)
            result.append(name)
    return result
