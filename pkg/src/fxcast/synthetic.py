"""Deterministic synthetic OHLC bars for tests and demos.

A seeded geometric random walk with regime switches: each regime draws its
own drift and volatility, so stretches of trending and choppy price action
alternate. Weekend gaps can be injected to exercise market-closure handling.
"""

from __future__ import annotations

from datetime import datetime, timedelta, timezone

import numpy as np

from .bars import Bar, BarSeries


def generate_bars(
    n_bars: int,
    interval_minutes: int = 15,
    seed: int = 0,
    symbol: str = "SYN/USD",
    start_price: float = 0.7,
    start: datetime | None = None,
    weekend_gaps: bool = False,
    regime_bars: tuple[int, int] = (150, 600),
    base_vol: float = 0.0005,
) -> BarSeries:
    """Generate a BarSeries of n_bars; identical inputs give identical bars."""
    if n_bars < 1:
        raise ValueError("n_bars must be positive")
    rng = np.random.default_rng(seed)
    if start is None:
        start = datetime(2020, 1, 6, tzinfo=timezone.utc)  # a Monday

    timestamps = _grid(start, n_bars, interval_minutes, weekend_gaps)

    # regime-switching log returns
    returns = np.empty(n_bars)
    produced = 0
    while produced < n_bars:
        length = int(rng.integers(regime_bars[0], regime_bars[1] + 1))
        length = min(length, n_bars - produced)
        drift = rng.normal(0.0, 0.3) * base_vol
        vol = base_vol * rng.uniform(0.5, 2.0)
        returns[produced : produced + length] = rng.normal(drift, vol, size=length)
        produced += length

    closes = start_price * np.exp(np.cumsum(returns))
    opens = np.empty(n_bars)
    opens[0] = start_price
    opens[1:] = closes[:-1]
    body_hi = np.maximum(opens, closes)
    body_lo = np.minimum(opens, closes)
    wick_up = np.abs(rng.normal(0.0, base_vol, size=n_bars))
    wick_dn = np.abs(rng.normal(0.0, base_vol, size=n_bars))
    highs = body_hi * (1.0 + wick_up)
    lows = body_lo * (1.0 - wick_dn)

    bars = tuple(
        Bar(
            timestamp=timestamps[i],
            open=float(opens[i]),
            high=float(highs[i]),
            low=float(lows[i]),
            close=float(closes[i]),
        )
        for i in range(n_bars)
    )
    return BarSeries(symbol=symbol, interval_minutes=interval_minutes, bars=bars)


def _grid(start: datetime, n_bars: int, interval_minutes: int, weekend_gaps: bool):
    step = timedelta(minutes=interval_minutes)
    stamps = []
    t = start
    while len(stamps) < n_bars:
        if weekend_gaps and t.weekday() >= 5:
            t += step
            continue
        stamps.append(t)
        t += step
    return stamps
