"""Event-driven backtest: entry, leverage, exit and spread rules plus reporting.

A long position opens when the predicted next-horizon high exceeds the
decision bar's close; full leverage applies only when that edge is at least
twice the model's validation MAE. The position closes at the predicted price
as soon as any in-horizon bar's high reaches it, otherwise at the horizon
close. The spread is deducted once per round trip as a price subtraction.
Each trade commits the full current capital at notional = capital x leverage
and capital compounds trade to trade (it may go negative; no margin call).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from . import metrics
from .bars import BarSeries, format_timestamp
from .errors import InsufficientHorizon, MisalignedForecast
from .forecaster import Forecast

# spreads in price units per pair; others must be configured explicitly
DEFAULT_SPREADS = {
    "AUD/USD": 0.00008,
    "CAD/USD": 0.0002,
    "NZD/USD": 0.0002,
    "CHF/USD": 0.00017,
}


@dataclass(frozen=True)
class StrategyConfig:
    """Trading-rule constants; leverage_trigger_mae is the model's validation MAE."""

    leverage_trigger_mae: float
    spread: float = 0.00008
    max_leverage: float = 200.0
    initial_capital: float = 10_000.0
    horizon_bars: int = 4

    def __post_init__(self):
        if self.spread < 0:
            raise ValueError("spread must be non-negative")
        if self.max_leverage < 1:
            raise ValueError("max_leverage must be at least 1")
        if self.initial_capital <= 0:
            raise ValueError("initial_capital must be positive")
        if self.leverage_trigger_mae < 0:
            raise ValueError("leverage_trigger_mae must be non-negative")
        if self.horizon_bars < 1:
            raise ValueError("horizon_bars must be positive")


@dataclass(frozen=True)
class Signal:
    enter: bool
    leverage: float


def generate_signal(forecast, close: float, config: StrategyConfig) -> Signal:
    """Entry rule: predicted high above close; leverage when edge >= 2x MAE."""
    predicted = getattr(forecast, "predicted_high", forecast)
    enter = predicted > close
    leveraged = predicted >= close + 2.0 * config.leverage_trigger_mae
    return Signal(enter=enter, leverage=config.max_leverage if leveraged else 1.0)


@dataclass
class TradeRecord:
    entry_time: datetime
    entry_price: float
    predicted_high: float
    leverage_used: float
    exit_time: datetime
    exit_price: float
    exit_reason: str                # "target-hit" | "timeout"
    pnl: float                      # account currency
    pnl_per_unit: float             # price units, spread already deducted
    min_price_during_hold: float
    capital_before: float
    capital_after: float
    marked_equity_trough: float     # capital marked at the worst in-trade low

    @staticmethod
    def csv_header() -> str:
        return (
            "entry_time,entry_price,predicted_high,leverage_used,exit_time,"
            "exit_price,exit_reason,pnl,pnl_per_unit,min_price_during_hold,"
            "capital_before,capital_after,marked_equity_trough"
        )

    def to_csv_row(self) -> str:
        return ",".join(
            [
                format_timestamp(self.entry_time),
                repr(self.entry_price),
                repr(self.predicted_high),
                repr(self.leverage_used),
                format_timestamp(self.exit_time),
                repr(self.exit_price),
                self.exit_reason,
                repr(self.pnl),
                repr(self.pnl_per_unit),
                repr(self.min_price_during_hold),
                repr(self.capital_before),
                repr(self.capital_after),
                repr(self.marked_equity_trough),
            ]
        )


def trades_to_csv(trades: list[TradeRecord]) -> str:
    lines = [TradeRecord.csv_header()]
    lines += [t.to_csv_row() for t in trades]
    return "\n".join(lines) + "\n"


@dataclass
class BacktestReport:
    initial_capital: float
    total_pnl: float
    final_capital: float
    lowest_capital_realized: float
    lowest_capital_marked: float
    worst_trade: float
    best_trade: float
    trade_count: int
    equity_curve: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "initial_capital": self.initial_capital,
            "total_pnl": self.total_pnl,
            "final_capital": self.final_capital,
            "lowest_capital_realized": self.lowest_capital_realized,
            "lowest_capital_marked": self.lowest_capital_marked,
            "worst_trade": self.worst_trade,
            "best_trade": self.best_trade,
            "trade_count": self.trade_count,
            "equity_curve": list(self.equity_curve),
        }


def simulate(
    test_bars: BarSeries,
    forecasts: list[Forecast],
    config: StrategyConfig,
) -> tuple[list[TradeRecord], BacktestReport]:
    """Replay forecasts against held-out bars under the trading rules.

    Trades are sequential and non-overlapping: while a position is open,
    later signals are skipped; a new entry may happen at or after the prior
    exit bar. Entries whose holding window would span a market-closure gap
    are skipped so the holding time never exceeds the horizon duration.
    """
    highs, lows, closes = test_bars.highs, test_bars.lows, test_bars.closes
    stamps = test_bars.timestamps
    h = config.horizon_bars
    horizon_span = timedelta(minutes=test_bars.interval_minutes * h)
    trades: list[TradeRecord] = []
    capital = config.initial_capital
    next_allowed = 0
    for forecast in sorted(forecasts, key=lambda f: f.decision_time):
        e = test_bars.index_of(forecast.decision_time)
        if e is None:
            raise MisalignedForecast(
                f"no bar at {forecast.decision_time} in the test series"
            )
        if e + h > len(test_bars) - 1:
            raise InsufficientHorizon(
                f"decision bar {forecast.decision_time} lacks {h} subsequent bars"
            )
        if e < next_allowed:
            continue  # position still open
        if stamps[e + h] - stamps[e] != horizon_span:
            continue  # holding window spans a market closure
        entry = closes[e]
        signal = generate_signal(forecast, entry, config)
        if not signal.enter:
            continue
        predicted = forecast.predicted_high
        exit_idx = e + h
        exit_price = closes[e + h]
        reason = "timeout"
        for j in range(e + 1, e + h + 1):
            if highs[j] >= predicted:
                exit_idx = j
                exit_price = predicted
                reason = "target-hit"
                break
        min_low = float(lows[e + 1 : exit_idx + 1].min())
        pnl_per_unit = exit_price - entry - config.spread
        pnl = pnl_per_unit / entry * capital * signal.leverage
        marked_per_unit = min_low - entry - config.spread
        marked_equity = capital + marked_per_unit / entry * capital * signal.leverage
        trades.append(
            TradeRecord(
                entry_time=stamps[e],
                entry_price=float(entry),
                predicted_high=float(predicted),
                leverage_used=signal.leverage,
                exit_time=stamps[exit_idx],
                exit_price=float(exit_price),
                exit_reason=reason,
                pnl=float(pnl),
                pnl_per_unit=float(pnl_per_unit),
                min_price_during_hold=min_low,
                capital_before=float(capital),
                capital_after=float(capital + pnl),
                marked_equity_trough=float(marked_equity),
            )
        )
        capital += pnl
        next_allowed = exit_idx
    return trades, report_metrics(trades, config)


def report_metrics(trades: list[TradeRecord], config: StrategyConfig) -> BacktestReport:
    """Aggregate a trade log into the headline capital/trough/extreme metrics."""
    initial = config.initial_capital
    if not trades:
        return BacktestReport(
            initial_capital=initial,
            total_pnl=0.0,
            final_capital=initial,
            lowest_capital_realized=initial,
            lowest_capital_marked=initial,
            worst_trade=0.0,
            best_trade=0.0,
            trade_count=0,
            equity_curve=[initial],
        )
    pnls = [t.pnl for t in trades]
    total = math.fsum(pnls)
    equity = [initial]
    for t in trades:
        equity.append(t.capital_after)
    realized = min(equity[1:])
    marked = min(realized, min(t.marked_equity_trough for t in trades))
    return BacktestReport(
        initial_capital=initial,
        total_pnl=total,
        final_capital=initial + total,
        lowest_capital_realized=realized,
        lowest_capital_marked=marked,
        worst_trade=min(pnls),
        best_trade=max(pnls),
        trade_count=len(trades),
        equity_curve=equity,
    )


def evaluate_forecasts(forecasts, actual_targets) -> dict:
    """MSE/RMSE/MAE in price units between predicted highs and realized highs."""
    predicted = np.array(
        [getattr(f, "predicted_high", f) for f in forecasts], dtype=np.float64
    )
    return metrics.evaluate(predicted, actual_targets)


def report_text(report: BacktestReport, stats: dict, context: dict) -> str:
    """Human-readable summary table with the headline row labels."""

    def money(value: float) -> str:
        return f"(${abs(value):,.0f})" if value < 0 else f"${value:,.0f}"

    def stat(key: str, fmt: str) -> str:
        value = stats.get(key)
        return "n/a" if value is None else format(value, fmt)

    rows = [
        ("Cluster method", context.get("cluster_method", "")),
        ("Currency Pair", context.get("symbol", "")),
        ("Forecast Period", context.get("forecast_period", "")),
        ("Input Sequence", context.get("input_sequence", "")),
        ("# of cluster", context.get("n_clusters", "")),
        ("MSE", stat("mse", ".4E")),
        ("RMSE", stat("rmse", ".7f")),
        ("MAE", stat("mae", ".7f")),
        ("Backtest Data Period", context.get("backtest_period", "")),
        ("Max Leverage Ratio", context.get("max_leverage", "")),
        ("Spread", context.get("spread", "")),
        (
            f"Backtest P&L with ${report.initial_capital:,.0f} initial capital",
            money(report.total_pnl),
        ),
        ("Lowest Capital level based on trades", money(report.lowest_capital_realized)),
        (
            "Lowest Capital level based on Minimum price hit",
            money(report.lowest_capital_marked),
        ),
        ("Worst Trade", money(report.worst_trade)),
        ("Best Trade", money(report.best_trade)),
        ("Trade Count", str(report.trade_count)),
    ]
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label:<{width}}  {value}" for label, value in rows) + "\n"
