"""fxcast: cluster-gated attention forecasting and event-driven backtesting
for intraday FX bars.

The pipeline: parse OHLC bars, compute technical indicators, rank and select
features, window and scale samples, cluster training windows, train one small
attention forecaster per cluster, then evaluate statistically (MSE/RMSE/MAE)
and economically (P&L, equity troughs, extreme trades) under event-driven
trading rules.
"""

from .bars import Bar, BarSeries, SplitSpec, parse_csv, serialize_csv, split_with_gap, validate_series
from .clustering import Birch, ClusterAssignment, KMeans, cluster_report
from .features import (
    FeatureRanking,
    MinMaxScaler,
    RankingConfig,
    SampleSet,
    WindowSpec,
    build_samples,
    fit_scaler,
    rank_features,
    select_top,
)
from .forecaster import (
    AttentionForecaster,
    ClusterEnsemble,
    Forecast,
    ModelConfig,
    train,
    train_ensemble,
)
from .indicators import (
    EventMask,
    FeatureFrame,
    IndicatorColumn,
    bollinger,
    build_feature_frame,
    default_feature_spec,
    detect_concealing_baby_swallow,
    detect_oversold,
    dmi,
    ema,
    macd,
    rsi,
    sma,
    stochastic,
)
from .backtest import (
    BacktestReport,
    StrategyConfig,
    TradeRecord,
    evaluate_forecasts,
    generate_signal,
    report_metrics,
    simulate,
)
from .synthetic import generate_bars

__version__ = "0.1.0"

__all__ = [
    "Bar",
    "BarSeries",
    "SplitSpec",
    "parse_csv",
    "serialize_csv",
    "split_with_gap",
    "validate_series",
    "Birch",
    "ClusterAssignment",
    "KMeans",
    "cluster_report",
    "FeatureRanking",
    "MinMaxScaler",
    "RankingConfig",
    "SampleSet",
    "WindowSpec",
    "build_samples",
    "fit_scaler",
    "rank_features",
    "select_top",
    "AttentionForecaster",
    "ClusterEnsemble",
    "Forecast",
    "ModelConfig",
    "train",
    "train_ensemble",
    "EventMask",
    "FeatureFrame",
    "IndicatorColumn",
    "bollinger",
    "build_feature_frame",
    "default_feature_spec",
    "detect_concealing_baby_swallow",
    "detect_oversold",
    "dmi",
    "ema",
    "macd",
    "rsi",
    "sma",
    "stochastic",
    "BacktestReport",
    "StrategyConfig",
    "TradeRecord",
    "evaluate_forecasts",
    "generate_signal",
    "report_metrics",
    "simulate",
    "generate_bars",
]
