"""Trading-rule replay: entries, leverage gate, exits, spread and reporting."""

import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from fxcast.backtest import (
    BacktestReport,
    StrategyConfig,
    TradeRecord,
    evaluate_forecasts,
    generate_signal,
    report_metrics,
    simulate,
    trades_to_csv,
)
from fxcast.errors import InsufficientHorizon, MisalignedForecast
from fxcast.forecaster import Forecast

from conftest import T0, make_series


def config(**kwargs):
    defaults = dict(leverage_trigger_mae=0.0004, spread=0.00008,
                    max_leverage=200.0, initial_capital=10_000.0, horizon_bars=4)
    defaults.update(kwargs)
    return StrategyConfig(**defaults)


def forecast_at(ts, predicted):
    return Forecast(predicted_high=predicted, cluster_id=0,
                    attention_weights=np.array([1.0]), decision_time=ts)


def bars_with(closes, highs=None, lows=None):
    closes = np.asarray(closes, dtype=np.float64)
    opens = np.empty_like(closes)
    opens[0] = closes[0]
    opens[1:] = closes[:-1]
    if highs is None:
        highs = np.maximum(opens, closes)
    if lows is None:
        lows = np.minimum(opens, closes)
    return make_series(opens, np.maximum(highs, np.maximum(opens, closes)),
                       np.minimum(lows, np.minimum(opens, closes)), closes)


class TestGenerateSignal:
    def test_leveraged_entry(self):
        signal = generate_signal(0.7010, 0.7000, config())
        assert signal.enter and signal.leverage == 200.0

    def test_small_edge_unleveraged(self):
        signal = generate_signal(0.7003, 0.7000, config())
        assert signal.enter and signal.leverage == 1.0

    def test_no_entry_when_predicted_below_close(self):
        assert not generate_signal(0.7000, 0.7000, config()).enter
        assert not generate_signal(0.6990, 0.7000, config()).enter

    def test_leverage_gate_at_exactly_twice_mae(self):
        close, mae = 0.7000, 0.0004
        threshold = close + 2.0 * mae
        at = generate_signal(threshold, close, config(leverage_trigger_mae=mae))
        assert at.leverage == 200.0
        below = generate_signal(
            np.nextafter(threshold, 0.0), close, config(leverage_trigger_mae=mae)
        )
        assert below.leverage == 1.0

    def test_accepts_forecast_objects(self):
        f = forecast_at(T0, 0.7010)
        assert generate_signal(f, 0.7000, config()).leverage == 200.0


def target_hit_fixture():
    """Decision bar closes at 0.7000; third horizon bar's high touches 0.7012."""
    closes = [0.6990, 0.7000, 0.7002, 0.7004, 0.7001, 0.6999, 0.7000]
    highs = [0.6992, 0.7001, 0.7004, 0.7012, 0.7003, 0.7001, 0.7002]
    series = bars_with(closes, highs=highs)
    return series, forecast_at(series.timestamps[1], 0.7010)


def timeout_fixture():
    """Horizon highs stay below the prediction; exit at the 60-min close."""
    closes = [0.6990, 0.7000, 0.7002, 0.7001, 0.6998, 0.6995, 0.6996]
    highs = [0.6992, 0.7001, 0.7005, 0.7003, 0.7000, 0.6998, 0.6998]
    series = bars_with(closes, highs=highs)
    return series, forecast_at(series.timestamps[1], 0.7010)


class TestSimulate:
    def test_target_hit_pnl_per_unit(self):
        series, forecast = target_hit_fixture()
        trades, _ = simulate(series, [forecast], config())
        assert len(trades) == 1
        trade = trades[0]
        assert trade.exit_reason == "target-hit"
        assert trade.exit_price == 0.7010
        assert trade.exit_time == series.timestamps[3]
        assert trade.pnl_per_unit == 0.7010 - 0.7000 - 0.00008
        assert trade.pnl_per_unit == pytest.approx(0.00092, abs=1e-12)

    def test_timeout_pnl_per_unit(self):
        series, forecast = timeout_fixture()
        trades, _ = simulate(series, [forecast], config())
        trade = trades[0]
        assert trade.exit_reason == "timeout"
        assert trade.exit_time == series.timestamps[5]
        assert trade.exit_price == 0.6995
        assert trade.pnl_per_unit == 0.6995 - 0.7000 - 0.00008
        assert trade.pnl_per_unit == pytest.approx(-0.00058, abs=1e-12)

    def test_zero_forecasts(self):
        series, _ = target_hit_fixture()
        trades, report = simulate(series, [], config())
        assert not trades
        assert report.final_capital == 10_000.0
        assert report.lowest_capital_realized == 10_000.0
        assert report.lowest_capital_marked == 10_000.0
        assert report.equity_curve == [10_000.0]

    def test_pnl_scales_with_capital_and_leverage(self):
        series, forecast = target_hit_fixture()
        trades, _ = simulate(series, [forecast], config())
        trade = trades[0]
        expected = trade.pnl_per_unit / 0.7000 * 10_000.0 * trade.leverage_used
        assert trade.pnl == pytest.approx(expected, rel=1e-15)
        assert trade.leverage_used == 200.0  # edge 0.0010 >= 2 x 0.0004

    def test_min_price_during_hold(self):
        closes = [0.6990, 0.7000, 0.6985, 0.6992, 0.6991, 0.6994, 0.6993]
        lows = [0.6985, 0.6995, 0.6980, 0.6988, 0.6989, 0.6991, 0.6990]
        series = bars_with(closes, lows=lows)
        forecast = forecast_at(series.timestamps[1], 0.7001)
        trades, _ = simulate(series, [forecast], config())
        assert trades[0].min_price_during_hold == 0.6980

    def test_overlapping_signals_skipped(self):
        series, forecast = timeout_fixture()
        overlapping = forecast_at(series.timestamps[2], 0.7010)
        trades, _ = simulate(series, [forecast, overlapping], config())
        assert len(trades) == 1

    def test_entry_allowed_at_prior_exit_bar(self):
        closes = [0.6990, 0.7000, 0.7002, 0.7004, 0.7001, 0.7000,
                  0.7003, 0.7002, 0.7001, 0.7005]
        highs = [0.6992, 0.7001, 0.7004, 0.7012, 0.7003, 0.7002,
                 0.7005, 0.7004, 0.7003, 0.7008]
        series = bars_with(closes, highs=highs)
        first = forecast_at(series.timestamps[1], 0.7010)   # exits at bar 3
        second = forecast_at(series.timestamps[3], 0.7006)  # entry at prior exit bar
        trades, _ = simulate(series, [first, second], config())
        assert len(trades) == 2
        assert trades[1].entry_time == series.timestamps[3]

    def test_misaligned_forecast(self):
        series, forecast = target_hit_fixture()
        bad = forecast_at(T0 + timedelta(minutes=7), 0.7010)
        with pytest.raises(MisalignedForecast):
            simulate(series, [bad], config())

    def test_insufficient_horizon(self):
        series, _ = target_hit_fixture()
        late = forecast_at(series.timestamps[-1], 0.7010)
        with pytest.raises(InsufficientHorizon):
            simulate(series, [late], config())

    def test_gap_spanning_hold_skipped(self):
        # weekend between decision bar and horizon end
        friday = datetime(2020, 1, 10, 23, 30, tzinfo=timezone.utc)
        stamps = [friday + timedelta(minutes=15 * i) for i in range(2)]
        monday = datetime(2020, 1, 13, tzinfo=timezone.utc)
        stamps += [monday + timedelta(minutes=15 * i) for i in range(5)]
        from fxcast.bars import Bar, BarSeries

        closes = [0.7000, 0.7000, 0.7002, 0.7004, 0.7001, 0.6999, 0.7000]
        bars = tuple(
            Bar(ts, closes[i], closes[i] + 0.0005, closes[i] - 0.0005, closes[i])
            for i, ts in enumerate(stamps)
        )
        series = BarSeries("TEST/USD", 15, bars)
        forecast = forecast_at(stamps[1], 0.7010)
        trades, report = simulate(series, [forecast], config())
        assert not trades
        assert report.trade_count == 0

    def test_no_look_ahead_truncation(self):
        series, forecast = target_hit_fixture()
        full_trades, _ = simulate(series, [forecast], config())
        truncated = series[:6]  # keep decision bar + full horizon only
        short_trades, _ = simulate(truncated, [forecast], config())
        assert full_trades[0] == short_trades[0]

    def test_monotone_spread(self):
        series, forecast = target_hit_fixture()
        previous = math.inf
        for spread in (0.0, 0.00008, 0.0002, 0.001):
            trades, _ = simulate(series, [forecast], config(spread=spread))
            assert trades[0].pnl <= previous
            previous = trades[0].pnl

    def test_zero_spread_always_hit_pnl_identity(self):
        series, forecast = target_hit_fixture()
        trades, _ = simulate(series, [forecast], config(spread=0.0))
        assert trades[0].pnl_per_unit == 0.7010 - 0.7000

    def test_deterministic(self):
        series, forecast = target_hit_fixture()
        a = simulate(series, [forecast], config())
        b = simulate(series, [forecast], config())
        assert a[0] == b[0]
        assert a[1].to_dict() == b[1].to_dict()

    def test_capital_compounds(self):
        closes = [0.6990, 0.7000, 0.7002, 0.7004, 0.7001, 0.7000,
                  0.7003, 0.7002, 0.7001, 0.7005, 0.7006, 0.7004]
        highs = [c + 0.0012 for c in closes]
        series = bars_with(closes, highs=highs)
        forecasts = [
            forecast_at(series.timestamps[1], 0.7008),
            forecast_at(series.timestamps[6], 0.7010),
        ]
        trades, report = simulate(series, forecasts, config())
        assert len(trades) == 2
        assert trades[1].capital_before == trades[0].capital_after
        assert report.final_capital == pytest.approx(
            10_000.0 + trades[0].pnl + trades[1].pnl
        )


def random_trade_log(n, seed):
    rng = np.random.default_rng(seed)
    capital = 10_000.0
    trades = []
    ts = T0
    for i in range(n):
        pnl = float(rng.normal(0.0, 200.0))
        hold_low = min(pnl, 0.0) - float(rng.uniform(0, 100))
        trades.append(
            TradeRecord(
                entry_time=ts,
                entry_price=0.7,
                predicted_high=0.701,
                leverage_used=1.0,
                exit_time=ts + timedelta(minutes=60),
                exit_price=0.7005,
                exit_reason="timeout",
                pnl=pnl,
                pnl_per_unit=pnl / 10_000.0 * 0.7,
                min_price_during_hold=0.699,
                capital_before=capital,
                capital_after=capital + pnl,
                marked_equity_trough=capital + hold_low,
            )
        )
        capital += pnl
        ts += timedelta(minutes=75)
    return trades


class TestReportMetrics:
    def test_accounting_identity_on_large_random_logs(self):
        for seed in (0, 1, 2):
            trades = random_trade_log(10_000, seed)
            report = report_metrics(trades, config())
            total = math.fsum(t.pnl for t in trades)
            assert abs((report.final_capital - report.initial_capital) - total) <= 1e-9

    def test_single_winning_trade(self):
        trades = random_trade_log(1, 3)
        trades[0].pnl = 500.0
        trades[0].capital_after = 10_500.0
        trades[0].marked_equity_trough = 9_900.0
        report = report_metrics(trades, config())
        assert report.final_capital == 10_500.0
        assert report.lowest_capital_realized == 10_500.0
        assert report.lowest_capital_marked == 9_900.0

    def test_worst_best(self):
        trades = random_trade_log(2, 4)
        trades[0].pnl, trades[1].pnl = 500.0, -300.0
        trades[0].capital_after = 10_500.0
        trades[1].capital_before = 10_500.0
        trades[1].capital_after = 10_200.0
        report = report_metrics(trades, config())
        assert report.worst_trade == -300.0
        assert report.best_trade == 500.0
        assert report.final_capital == pytest.approx(10_200.0)

    def test_marked_trough_below_realized_on_deep_low(self):
        series_closes = [0.6990, 0.7000, 0.7002, 0.7004, 0.7001, 0.6999, 0.7000]
        highs = [0.6992, 0.7001, 0.7004, 0.7012, 0.7003, 0.7001, 0.7002]
        lows = [0.6985, 0.6990, 0.6930, 0.6985, 0.6989, 0.6991, 0.6990]
        series = bars_with(series_closes, highs=highs, lows=lows)
        forecast = forecast_at(series.timestamps[1], 0.7010)
        _, report = simulate(series, [forecast], config())
        assert report.lowest_capital_marked < report.lowest_capital_realized

    def test_marked_never_above_realized(self):
        for seed in range(5):
            trades = random_trade_log(200, seed)
            report = report_metrics(trades, config())
            assert report.lowest_capital_marked <= report.lowest_capital_realized

    def test_csv_log(self):
        trades = random_trade_log(3, 9)
        text = trades_to_csv(trades)
        lines = text.strip().split("\n")
        assert lines[0].startswith("entry_time,entry_price,predicted_high")
        assert len(lines) == 4


class TestEvaluateForecasts:
    def test_perfect(self):
        stats = evaluate_forecasts([0.7, 0.8], np.array([0.7, 0.8]))
        assert stats == {"mse": 0.0, "rmse": 0.0, "mae": 0.0}

    def test_symmetric_milli_errors(self):
        stats = evaluate_forecasts([0.701, 0.699], np.array([0.700, 0.700]))
        assert stats["mse"] == pytest.approx(1e-6, rel=1e-9)
        assert stats["rmse"] == pytest.approx(1e-3, rel=1e-9)
        assert stats["mae"] == pytest.approx(1e-3, rel=1e-9)

    def test_rmse_squares_to_mse(self):
        rng = np.random.default_rng(10)
        preds = rng.uniform(0.6, 0.8, size=50)
        actual = rng.uniform(0.6, 0.8, size=50)
        stats = evaluate_forecasts(preds, actual)
        assert stats["rmse"] ** 2 == pytest.approx(stats["mse"], rel=1e-12)

    def test_accepts_forecast_objects(self):
        forecasts = [forecast_at(T0, 0.701), forecast_at(T0, 0.699)]
        stats = evaluate_forecasts(forecasts, np.array([0.700, 0.700]))
        assert stats["mae"] == pytest.approx(1e-3, rel=1e-9)
