"""Shared fixtures and helpers for the test suite."""

from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from fxcast.bars import Bar, BarSeries

T0 = datetime(2020, 1, 6, tzinfo=timezone.utc)


def make_series(opens, highs, lows, closes, interval=15, symbol="TEST/USD", start=T0):
    """Build a BarSeries from parallel price arrays on a contiguous grid."""
    bars = tuple(
        Bar(
            timestamp=start + timedelta(minutes=interval * i),
            open=float(o),
            high=float(h),
            low=float(l),
            close=float(c),
        )
        for i, (o, h, l, c) in enumerate(zip(opens, highs, lows, closes))
    )
    return BarSeries(symbol=symbol, interval_minutes=interval, bars=bars)


def random_series(n, seed, interval=15, base=1.0, vol=0.004):
    """A deterministic random-walk series with proper OHLC envelopes."""
    rng = np.random.default_rng(seed)
    closes = base * np.exp(np.cumsum(rng.normal(0.0, vol, size=n)))
    opens = np.empty(n)
    opens[0] = base
    opens[1:] = closes[:-1]
    hi = np.maximum(opens, closes) * (1.0 + np.abs(rng.normal(0.0, vol / 2, size=n)))
    lo = np.minimum(opens, closes) * (1.0 - np.abs(rng.normal(0.0, vol / 2, size=n)))
    return make_series(opens, hi, lo, closes, interval=interval)


@pytest.fixture
def twenty_bar_series():
    """A fixed 20-bar fixture with varied up/down moves for indicator oracles."""
    return random_series(20, seed=1234)
