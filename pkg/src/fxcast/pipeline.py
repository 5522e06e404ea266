"""Artifact-driven pipeline stages behind the CLI.

Every stage writes its artifact plus a manifest (stage name, config hash,
seed, input-file hashes) so a run can be checked for staleness and
regenerated exactly. Artifacts contain no timestamps or absolute paths:
re-running with an unchanged config reproduces them byte for byte.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import itertools
import json
import os
from pathlib import Path

import numpy as np

from . import backtest as bt
from . import indicators as ind
from .bars import (
    BarSeries,
    SplitSpec,
    format_timestamp,
    parse_csv,
    parse_timestamp,
    serialize_csv,
    split_with_gap,
    validate_series,
)
from .clustering import Birch, ClusterAssignment, KMeans, cluster_report, cluster_report_csv, load_clusterer
from .config import RunConfig, from_dict as config_from_dict
from .errors import ConfigHashMismatch, FxcastError, MissingArtifact
from .features import (
    MinMaxScaler,
    RankingConfig,
    WindowSpec,
    build_samples,
    fit_scaler,
    rank_features,
    select_top,
)
from .forecaster import ClusterEnsemble, ModelConfig, train_ensemble
from .indicators import FeatureFrame, IndicatorColumn


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(out: Path, name: str, text: str, config: RunConfig, stage: str,
           inputs: dict[str, str] | None = None, meta: dict | None = None) -> Path:
    path = out / name
    path.write_text(text, encoding="utf-8")
    manifest = {
        "artifact": name,
        "stage": stage,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "seed": config.seed,
        "inputs": inputs or {},
        "sha256": _sha256(text.encode("utf-8")),
    }
    if meta is not None:
        manifest["meta"] = meta
    (out / f"{name}.manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def _read(out: Path, name: str, config: RunConfig) -> tuple[str, dict]:
    path = out / name
    manifest_path = out / f"{name}.manifest.json"
    if not path.exists() or not manifest_path.exists():
        raise MissingArtifact(f"{name} not found in {out}; run the upstream stage first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("config_hash") != config.hash():
        raise ConfigHashMismatch(
            f"{name} was produced under a different config; re-run its stage"
        )
    return path.read_text(encoding="utf-8"), manifest


def _ensure_out(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return out


# --- ingest ---

def stage_ingest(config: RunConfig, validate_only: bool = False) -> dict:
    """Parse and validate the input CSV; write the canonical bar store."""
    if not config.input_csv:
        raise MissingArtifact("config.input_csv is not set")
    raw = Path(config.input_csv).read_bytes()
    series = parse_csv(raw, config.interval_minutes, symbol=config.symbol)
    report = validate_series(series)
    summary = {
        "bars": len(series),
        "first": str(series.timestamps[0]),
        "last": str(series.timestamps[-1]),
        "gaps": len(report.gaps),
    }
    if validate_only:
        return summary
    out = _ensure_out(config)
    inputs = {os.path.basename(config.input_csv): _sha256(raw)}
    _write(out, "bars.csv", serialize_csv(series), config, "ingest", inputs)
    _write(out, "validation.txt", report.to_text(), config, "ingest", inputs)
    _write(out, "validation.json", json.dumps(report.to_dict(), indent=2) + "\n",
           config, "ingest", inputs)
    return summary


def _load_bars(out: Path, name: str, config: RunConfig) -> BarSeries:
    text, _ = _read(out, name, config)
    return parse_csv(text, config.interval_minutes, symbol=config.symbol)


# --- features ---

def _split_spec(config: RunConfig) -> SplitSpec:
    if config.split_mode == "by-date":
        return SplitSpec(
            mode="by-date",
            train_end=parse_timestamp(config.train_end),
            test_start=parse_timestamp(config.test_start),
            gap_hours=config.gap_hours,
        )
    return SplitSpec(
        mode="by-ratio",
        train_fraction=config.train_fraction,
        gap_hours=config.gap_hours,
    )


def _frame_csv(frame: FeatureFrame) -> str:
    return frame.to_csv()


def _frame_from_csv(text: str, meta: dict, config: RunConfig) -> FeatureFrame:
    lines = text.strip().split("\n")
    names = lines[0].split(",")[1:]
    warmups = {c["name"]: c["warmup"] for c in meta["columns"]}
    n = len(lines) - 1
    stamps = []
    matrix = np.full((n, len(names)), np.nan)
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        stamps.append(parse_timestamp(cells[0]))
        for j, cell in enumerate(cells[1:]):
            if cell:
                matrix[i, j] = float(cell)
    columns = [
        IndicatorColumn(name, matrix[:, j], warmups[name])
        for j, name in enumerate(names)
    ]
    return FeatureFrame(meta["series_ref"], meta["interval_minutes"], stamps, columns)


def stage_features(config: RunConfig) -> dict:
    """Split bars with the leakage gap, then build per-partition feature frames."""
    out = _ensure_out(config)
    series = _load_bars(out, "bars.csv", config)
    train, test = split_with_gap(series, _split_spec(config))
    if config.indicator_spec is not None:
        spec = [(name, dict(params)) for name, params in config.indicator_spec]
    else:
        spec = ind.default_feature_spec()
    frames = {}
    for name, part in (("train", train), ("test", test)):
        _write(out, f"bars_{name}.csv", serialize_csv(part), config, "features")
        frame = ind.build_feature_frame(part, spec)
        _write(out, f"features_{name}.csv", _frame_csv(frame), config, "features",
               meta=frame.manifest())
        frames[name] = frame
    return {
        "train_bars": len(train),
        "test_bars": len(test),
        "columns": len(frames["train"].names),
    }


def _load_frame(out: Path, name: str, config: RunConfig) -> FeatureFrame:
    text, manifest = _read(out, name, config)
    return _frame_from_csv(text, manifest["meta"], config)


# --- feature selection ---

def stage_select_features(config: RunConfig) -> dict:
    """Rank candidate features one at a time and persist the selected set."""
    out = _ensure_out(config)
    frame = _load_frame(out, "features_train.csv", config)
    candidates = (
        list(config.rank_candidates)
        if config.rank_candidates
        else [n for n in frame.names if n not in ("open", "high", "low", "close")]
    )
    ranking_config = RankingConfig(
        epochs=config.rank_epochs,
        tail=config.rank_tail,
        input_len_bars=config.input_len_bars,
        horizon_bars=config.horizon_bars,
        hidden_size=config.rank_hidden_size,
        learning_rate=config.rank_learning_rate,
        batch_size=config.rank_batch_size,
        max_samples=config.rank_max_samples,
        seed=config.seed,
    )
    ranking = rank_features(frame, candidates, ranking_config)
    selected = select_top(ranking, k=min(config.select_top_k, len(ranking)))
    _write(out, "ranking.csv", ranking.to_csv(), config, "select-features")
    _write(out, "selected_features.json", json.dumps({"features": selected}) + "\n",
           config, "select-features")
    return {"candidates": len(candidates), "selected": selected}


def resolve_feature_names(config: RunConfig, out: Path) -> list[str]:
    if config.feature_names:
        return list(config.feature_names)
    text, _ = _read(out, "selected_features.json", config)
    return list(json.loads(text)["features"])


def _event_mask(frame: FeatureFrame, config: RunConfig):
    if config.event == "none":
        return None
    if config.event != "oversold":
        raise ValueError(f"unknown event {config.event!r}")
    col = ind.rsi(frame.values("close"), config.event_rsi_period)
    oversold, _ = ind.detect_oversold(col, config.event_low_thresh, config.event_high_thresh)
    return oversold


def _window_names(feature_names: list[str], config: RunConfig) -> list[str]:
    """Sample-window columns: prediction features plus any cluster-only ones."""
    names = list(feature_names)
    for extra in config.cluster_feature_names or ():
        if extra not in names:
            names.append(extra)
    return names


def _scaler_names(feature_names: list[str], config: RunConfig) -> list[str]:
    names = _window_names(feature_names, config)
    if "high" not in names:
        names.append("high")
    return names


# --- clustering ---

def stage_cluster(config: RunConfig) -> dict:
    """Fit the scaler on training rows, window the samples, fit the clusterer."""
    out = _ensure_out(config)
    frame = _load_frame(out, "features_train.csv", config)
    feature_names = resolve_feature_names(config, out)
    scaler = fit_scaler(frame, _scaler_names(feature_names, config))
    _write(out, "scaler.json", json.dumps(scaler.to_dict()) + "\n", config, "cluster")
    window = WindowSpec(
        config.input_len_bars, config.horizon_bars,
        tuple(_window_names(feature_names, config)),
    )
    samples = build_samples(frame, window, scaler, _event_mask(frame, config))
    _write(out, "samples_train.txt", samples.save_text(), config, "cluster")
    X = samples.flattened(config.cluster_feature_names)
    if config.cluster_method == "kmeans":
        clusterer = KMeans(
            n_clusters=config.n_clusters, n_init=config.kmeans_n_init, seed=config.seed
        ).fit(X)
    elif config.cluster_method == "birch":
        clusterer = Birch(
            threshold=config.birch_threshold, n_clusters=config.n_clusters
        ).fit(X)
    else:
        raise ValueError(f"unknown cluster_method {config.cluster_method!r}")
    _write(out, "clustering.json", json.dumps(clusterer.to_dict()) + "\n", config, "cluster")
    assignment = ClusterAssignment(clusterer.labels_, len(clusterer.cluster_centers_))
    _write(out, "cluster_report.csv", cluster_report_csv(cluster_report(assignment)),
           config, "cluster")
    return {
        "samples": len(samples),
        "clusters": len(clusterer.cluster_centers_),
        "sizes": assignment.sizes,
    }


# --- training ---

def _model_config(config: RunConfig, n_features: int) -> ModelConfig:
    return ModelConfig(
        n_features=n_features,
        input_len_bars=config.input_len_bars,
        hidden_size=config.hidden_size,
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
    )


def stage_train(config: RunConfig) -> dict:
    """Train one attention forecaster per cluster on the training samples."""
    out = _ensure_out(config)
    frame = _load_frame(out, "features_train.csv", config)
    feature_names = resolve_feature_names(config, out)
    scaler = MinMaxScaler.from_dict(json.loads(_read(out, "scaler.json", config)[0]))
    clusterer = load_clusterer(json.loads(_read(out, "clustering.json", config)[0]))
    window = WindowSpec(
        config.input_len_bars, config.horizon_bars,
        tuple(_window_names(feature_names, config)),
    )
    samples = build_samples(frame, window, scaler, _event_mask(frame, config))
    ensemble = train_ensemble(
        samples,
        clusterer,
        _model_config(config, len(feature_names)),
        val_fraction=config.val_fraction,
        cluster_feature_names=config.cluster_feature_names,
        prediction_feature_names=(
            tuple(feature_names) if config.cluster_feature_names else None
        ),
    )
    _write(out, "ensemble.json", json.dumps(ensemble.to_dict()) + "\n", config, "train")
    log_lines = ["cluster,epoch,train_mse,val_mse"]
    for cid, history in sorted(ensemble.histories.items()):
        for epoch, (tr, va) in enumerate(zip(history.train_mse, history.val_mse)):
            log_lines.append(f"{cid},{epoch},{tr!r},{va!r}")
    _write(out, "training_log.csv", "\n".join(log_lines) + "\n", config, "train")
    # per-cluster size/percentage joined with validation metrics, largest first
    labels = clusterer.predict(
        samples.flattened(config.cluster_feature_names)
    )
    assignment = ClusterAssignment(labels, len(clusterer.cluster_centers_))
    rows = cluster_report(assignment, ensemble.per_cluster_metrics)
    _write(out, "cluster_performance.csv", cluster_report_csv(rows), config, "train")
    return {
        "clusters_trained": len(ensemble.models),
        "validation": ensemble.validation_metrics,
        "warnings": ensemble.warnings,
    }


# --- backtest ---

def _resolve_spread(config: RunConfig) -> float:
    if config.spread is not None:
        return config.spread
    if config.symbol in bt.DEFAULT_SPREADS:
        return bt.DEFAULT_SPREADS[config.symbol]
    raise ValueError(f"no default spread for {config.symbol!r}; set spread explicitly")


def mae_in_price_units(ensemble: ClusterEnsemble, scaler: MinMaxScaler) -> float:
    """Validation MAE converted from scaled units via the high-price span."""
    i = scaler.index_of("high")
    span = float(scaler.max_[i] - scaler.min_[i])
    return ensemble.validation_mae * span


def stage_backtest(config: RunConfig) -> dict:
    """Forecast every test-side event bar and replay the trading rules."""
    out = _ensure_out(config)
    test_bars = _load_bars(out, "bars_test.csv", config)
    frame = _load_frame(out, "features_test.csv", config)
    feature_names = resolve_feature_names(config, out)
    scaler = MinMaxScaler.from_dict(json.loads(_read(out, "scaler.json", config)[0]))
    ensemble = ClusterEnsemble.from_dict(json.loads(_read(out, "ensemble.json", config)[0]))
    window = WindowSpec(
        config.input_len_bars, config.horizon_bars,
        tuple(_window_names(feature_names, config)),
    )
    samples = build_samples(frame, window, scaler, _event_mask(frame, config))
    forecasts = ensemble.forecast_all(samples, scaler)
    strategy = bt.StrategyConfig(
        leverage_trigger_mae=mae_in_price_units(ensemble, scaler),
        spread=_resolve_spread(config),
        max_leverage=config.max_leverage,
        initial_capital=config.initial_capital,
        horizon_bars=config.horizon_bars,
    )
    trades, report = bt.simulate(test_bars, forecasts, strategy)
    if forecasts:
        actual_prices = scaler.invert_feature("high", samples.targets)
        stats = bt.evaluate_forecasts(forecasts, actual_prices)
    else:
        stats = {"mse": None, "rmse": None, "mae": None}
    payload = {
        "report": report.to_dict(),
        "stats": stats,
        "strategy": {
            "spread": strategy.spread,
            "max_leverage": strategy.max_leverage,
            "leverage_trigger_mae": strategy.leverage_trigger_mae,
            "initial_capital": strategy.initial_capital,
            "horizon_bars": strategy.horizon_bars,
        },
        "n_forecasts": len(forecasts),
        "test_period": {
            "first": format_timestamp(test_bars.timestamps[0]),
            "last": format_timestamp(test_bars.timestamps[-1]),
        },
    }
    _write(out, "trades.csv", bt.trades_to_csv(trades), config, "backtest")
    _write(out, "backtest.json", json.dumps(payload, indent=2, sort_keys=True) + "\n",
           config, "backtest")
    return {"trades": report.trade_count, "total_pnl": report.total_pnl, "stats": stats}


# --- report ---

def stage_report(config: RunConfig) -> dict:
    """Summarise one run into a headline table plus a machine-readable file."""
    out = _ensure_out(config)
    payload = json.loads(_read(out, "backtest.json", config)[0])
    clustering = json.loads(_read(out, "clustering.json", config)[0])
    ensemble_meta = json.loads(_read(out, "ensemble.json", config)[0])

    if clustering["kind"] == "birch":
        requested = clustering["n_clusters"]
        final = clustering["n_clusters_final"]
        n_clusters = (
            f"{requested} but system reduces to {final}" if final < requested else str(final)
        )
        method = "Birch"
        inertia = None
    else:
        n_clusters = str(clustering["n_clusters"])
        method = "K-means"
        inertia = clustering["inertia"]

    interval = config.interval_minutes
    context = {
        "cluster_method": method,
        "symbol": config.symbol,
        "forecast_period": f"Next {config.horizon_bars * interval} mins",
        "input_sequence": f"last {config.input_len_bars * interval} mins",
        "n_clusters": n_clusters,
        "backtest_period": (
            f"{payload['test_period']['first']} - {payload['test_period']['last']}"
        ),
        "max_leverage": str(int(payload["strategy"]["max_leverage"])),
        "spread": repr(payload["strategy"]["spread"]),
    }
    report = bt.BacktestReport(**payload["report"])
    text = bt.report_text(report, payload["stats"], context)

    per_cluster = ensemble_meta["per_cluster_metrics"]
    summary = {
        "context": context,
        "stats": payload["stats"],
        "backtest": payload["report"],
        "validation": ensemble_meta["validation_metrics"],
        "per_cluster_validation": per_cluster,
        "inertia": inertia,
        "warnings": ensemble_meta.get("warnings", []),
    }
    _write(out, "report.txt", text, config, "report")
    _write(out, "report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n",
           config, "report")
    return summary


STAGES = {
    "ingest": stage_ingest,
    "features": stage_features,
    "select-features": stage_select_features,
    "cluster": stage_cluster,
    "train": stage_train,
    "backtest": stage_backtest,
    "report": stage_report,
}


def run_pipeline(config: RunConfig) -> dict:
    """All stages in order; feature selection runs only when needed."""
    stage_ingest(config)
    stage_features(config)
    if not config.feature_names:
        stage_select_features(config)
    stage_cluster(config)
    stage_train(config)
    stage_backtest(config)
    return stage_report(config)


# --- sweep ---

def _cell_name(overrides: dict) -> str:
    parts = [f"{k}-{v}" for k, v in overrides.items()]
    return "_".join(parts).replace("/", "-").replace(" ", "")


def _run_cell(args: tuple) -> dict:
    base_dict, overrides = args
    config = config_from_dict(base_dict)
    cell_dir = os.path.join(config.out_dir, "sweep", _cell_name(overrides))
    cell = config.with_overrides({**overrides, "out_dir": cell_dir, "sweep": {}})
    row = dict(overrides)
    try:
        summary = run_pipeline(cell)
        row.update(
            {
                "status": "ok",
                "mse": summary["stats"]["mse"],
                "rmse": summary["stats"]["rmse"],
                "mae": summary["stats"]["mae"],
                "pnl": summary["backtest"]["total_pnl"],
                "lowest_capital_realized": summary["backtest"]["lowest_capital_realized"],
                "lowest_capital_marked": summary["backtest"]["lowest_capital_marked"],
                "worst_trade": summary["backtest"]["worst_trade"],
                "best_trade": summary["backtest"]["best_trade"],
                "trade_count": summary["backtest"]["trade_count"],
                "inertia": summary.get("inertia"),
                "error": "",
            }
        )
    except (FxcastError, ValueError) as exc:
        row.update({"status": "error", "error": f"{type(exc).__name__}: {exc}"})
    return row


def run_sweep(config: RunConfig, jobs: int = 1) -> list[dict]:
    """One pipeline run per grid cell; failures are recorded, not fatal."""
    if not config.sweep:
        raise ValueError("config.sweep grid is empty")
    keys = list(config.sweep)
    cells = [
        dict(zip(keys, values))
        for values in itertools.product(*(config.sweep[k] for k in keys))
    ]
    base = config.to_dict()
    args = [(base, overrides) for overrides in cells]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, args))
    else:
        rows = [_run_cell(a) for a in args]

    columns = keys + [
        "status", "mse", "rmse", "mae", "pnl", "lowest_capital_realized",
        "lowest_capital_marked", "worst_trade", "best_trade", "trade_count",
        "inertia", "error",
    ]
    lines = [",".join(columns)]
    for row in rows:
        cells_text = []
        for col in columns:
            value = row.get(col, "")
            cells_text.append("" if value is None else str(value))
        lines.append(",".join(cells_text))
    out = _ensure_out(config)
    (out / "sweep_results.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return rows
