"""Technical indicators and event/pattern detectors over OHLC bars.

Every indicator returns an IndicatorColumn aligned 1:1 with the input bars,
with NaN for the leading warmup indices. All functions are causal (index i
depends only on bars <= i) and deterministic. Recurrence-style smoothers
(EMA, Wilder sums) run through scipy.signal.lfilter; the test suite replays
the recurrences independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .bars import BarSeries
from .errors import DegenerateRange, UnknownIndicator, WindowTooLong


@dataclass(frozen=True)
class IndicatorColumn:
    """A named per-bar value column; indices < warmup are NaN."""

    name: str
    values: np.ndarray
    warmup: int

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.warmup > 0 and not np.all(np.isnan(self.values[: self.warmup])):
            raise ValueError(f"column {self.name}: warmup prefix must be NaN")


@dataclass(frozen=True)
class EventMask:
    """Per-bar boolean flags for an event or candlestick pattern."""

    kind: str
    flags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "flags", np.asarray(self.flags, dtype=bool))


def _leading_nan(values: np.ndarray) -> int:
    defined = np.flatnonzero(~np.isnan(values))
    return int(defined[0]) if defined.size else len(values)


def _as_values(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def _require_window(n: int, defined_length: int, what: str = "window") -> None:
    if n < 1:
        raise ValueError(f"{what} length must be >= 1")
    if n > defined_length:
        raise WindowTooLong(f"{what} {n} exceeds {defined_length} defined values")


def sma(values, n: int, name: str | None = None) -> IndicatorColumn:
    """Simple moving average over the last n values (inclusive)."""
    x = _as_values(values)
    lead = _leading_nan(x)
    _require_window(n, len(x) - lead, "sma window")
    out = np.full(len(x), np.nan)
    out[lead + n - 1 :] = sliding_window_view(x[lead:], n).mean(axis=-1)
    return IndicatorColumn(name or f"sma_{n}", out, lead + n - 1)


def ema(values, n: int, name: str | None = None) -> IndicatorColumn:
    """Exponential moving average, alpha = 2/(n+1), seeded with the first-n SMA."""
    x = _as_values(values)
    lead = _leading_nan(x)
    core = x[lead:]
    _require_window(n, len(core), "ema window")
    alpha = 2.0 / (n + 1)
    seed = float(np.mean(core[:n]))
    out = np.full(len(x), np.nan)
    out[lead + n - 1] = seed
    tail = core[n:]
    if tail.size:
        zi = np.array([(1.0 - alpha) * seed])
        out[lead + n :] = lfilter([alpha], [1.0, alpha - 1.0], tail, zi=zi)[0]
    return IndicatorColumn(name or f"ema_{n}", out, lead + n - 1)


def rsi(close, n: int = 14, method: str = "simple", name: str | None = None) -> IndicatorColumn:
    """Relative strength index over n bar-to-bar changes.

    ``method="simple"`` averages gains/losses with a plain n-bar mean;
    ``method="wilder"`` uses Wilder's smoothed average. Zero mean loss maps
    to 100, zero mean gain (with non-zero loss) to 0.
    """
    x = _as_values(close)
    lead = _leading_nan(x)
    core = x[lead:]
    if len(core) <= n:
        raise WindowTooLong(f"rsi needs more than {n} defined values, got {len(core)}")
    deltas = np.diff(core)
    gains = np.clip(deltas, 0.0, None)
    losses = np.clip(-deltas, 0.0, None)
    if method == "simple":
        avg_gain = sliding_window_view(gains, n).mean(axis=-1)
        avg_loss = sliding_window_view(losses, n).mean(axis=-1)
    elif method == "wilder":
        avg_gain = _wilder_average(gains, n)
        avg_loss = _wilder_average(losses, n)
    else:
        raise ValueError(f"unknown rsi method {method!r}")

    values = np.empty_like(avg_gain)
    loss_zero = avg_loss == 0.0
    gain_zero = (avg_gain == 0.0) & ~loss_zero
    normal = ~loss_zero & ~gain_zero
    rs = avg_gain[normal] / avg_loss[normal]
    values[normal] = 100.0 - 100.0 / (1.0 + rs)
    values[loss_zero] = 100.0
    values[gain_zero] = 0.0

    out = np.full(len(x), np.nan)
    out[lead + n :] = values
    return IndicatorColumn(name or f"rsi_{n}", out, lead + n)


def _wilder_average(x: np.ndarray, n: int) -> np.ndarray:
    """a[0] = mean(x[:n]); a[t] = (a[t-1]*(n-1) + x[t]) / n."""
    seed = float(np.mean(x[:n]))
    out = np.empty(x.size - n + 1)
    out[0] = seed
    rest = x[n:]
    if rest.size:
        decay = (n - 1.0) / n
        zi = np.array([decay * seed])
        out[1:] = lfilter([1.0 / n], [1.0, -decay], rest, zi=zi)[0]
    return out


def macd(
    close,
    fast: int = 12,
    slow: int = 26,
    signal_n: int = 9,
    signal_mode: str = "sma",
    name: str = "macd",
) -> tuple[IndicatorColumn, IndicatorColumn]:
    """MACD line (fast EMA - slow EMA) and its signal line.

    The signal line defaults to an SMA of the MACD line; set
    ``signal_mode="ema"`` for the industry-standard EMA convention.
    """
    fast_col = ema(close, fast)
    slow_col = ema(close, slow)
    line = fast_col.values - slow_col.values
    line_col = IndicatorColumn(f"{name}_line", line, max(fast_col.warmup, slow_col.warmup))
    if signal_mode == "sma":
        signal = sma(line, signal_n, name=f"{name}_signal")
    elif signal_mode == "ema":
        signal = ema(line, signal_n, name=f"{name}_signal")
    else:
        raise ValueError(f"unknown signal_mode {signal_mode!r}")
    return line_col, signal


def bollinger(close, n: int = 20, name: str | None = None) -> tuple[IndicatorColumn, ...]:
    """Bollinger bands: SMA mid plus/minus 1 and 2 population standard deviations.

    Returns (mid, upper1, lower1, upper2, lower2).
    """
    if n < 2:
        raise ValueError("bollinger needs n >= 2")
    x = _as_values(close)
    lead = _leading_nan(x)
    _require_window(n, len(x) - lead, "bollinger window")
    prefix = name or f"bb{n}"
    windows = sliding_window_view(x[lead:], n)
    mid = np.full(len(x), np.nan)
    sd = np.full(len(x), np.nan)
    mid[lead + n - 1 :] = windows.mean(axis=-1)
    sd[lead + n - 1 :] = windows.std(axis=-1)
    warmup = lead + n - 1
    return (
        IndicatorColumn(f"{prefix}_mid", mid, warmup),
        IndicatorColumn(f"{prefix}_up1", mid + sd, warmup),
        IndicatorColumn(f"{prefix}_lo1", mid - sd, warmup),
        IndicatorColumn(f"{prefix}_up2", mid + 2.0 * sd, warmup),
        IndicatorColumn(f"{prefix}_lo2", mid - 2.0 * sd, warmup),
    )


def stochastic(
    series: BarSeries, n: int = 14, d_n: int = 3, name: str | None = None
) -> tuple[IndicatorColumn, IndicatorColumn]:
    """Stochastic %K over the last n bars (inclusive) and %D, its d_n-bar SMA.

    A flat window (highest high == lowest low) yields the neutral value 50.
    """
    _require_window(n, len(series), "stochastic window")
    prefix = name or f"stoch{n}"
    highs = sliding_window_view(series.highs, n).max(axis=-1)
    lows = sliding_window_view(series.lows, n).min(axis=-1)
    close = series.closes[n - 1 :]
    span = highs - lows
    with np.errstate(invalid="ignore", divide="ignore"):
        raw = 100.0 * (close - lows) / span
    raw = np.where(span == 0.0, 50.0, raw)
    k = np.full(len(series), np.nan)
    k[n - 1 :] = raw
    k_col = IndicatorColumn(f"{prefix}_k", k, n - 1)
    d_col = sma(k, d_n, name=f"{prefix}_d")
    return k_col, d_col


def dmi(
    series: BarSeries, n: int = 14, name: str | None = None
) -> tuple[IndicatorColumn, IndicatorColumn, IndicatorColumn]:
    """Directional movement: +DI, -DI and DX over an n-bar smoothed window.

    Raw +DM/-DM keep only the larger side when both are positive (ties zero
    both). Smoothing is the running sum S_t = S_{t-1} - S_{t-1}/n + DM_t
    seeded with the first n-sum; the true range is smoothed identically.
    DX is NaN where +DI + -DI == 0.
    """
    if len(series) <= n:
        raise WindowTooLong(f"dmi needs more than {n} bars, got {len(series)}")
    prefix = name or f"dmi{n}"
    high, low, close = series.highs, series.lows, series.closes
    up = high[1:] - high[:-1]
    down = low[:-1] - low[1:]
    plus_dm = np.where((up > down) & (up > 0.0), up, 0.0)
    minus_dm = np.where((down > up) & (down > 0.0), down, 0.0)
    tr = np.maximum.reduce(
        [high[1:] - low[1:], np.abs(high[1:] - close[:-1]), np.abs(low[1:] - close[:-1])]
    )
    atr_s = _wilder_sum(tr, n)
    if np.any(atr_s == 0.0):
        raise DegenerateRange(f"ATR is zero over an {n}-bar window")
    plus_di_v = 100.0 * _wilder_sum(plus_dm, n) / atr_s
    minus_di_v = 100.0 * _wilder_sum(minus_dm, n) / atr_s
    di_sum = plus_di_v + minus_di_v
    with np.errstate(invalid="ignore", divide="ignore"):
        dx_v = 100.0 * np.abs(plus_di_v - minus_di_v) / np.abs(di_sum)
    dx_v = np.where(di_sum == 0.0, np.nan, dx_v)

    def col(values, suffix):
        out = np.full(len(series), np.nan)
        out[n:] = values
        return IndicatorColumn(f"{prefix}_{suffix}", out, n)

    return col(plus_di_v, "plus_di"), col(minus_di_v, "minus_di"), col(dx_v, "dx")


def _wilder_sum(x: np.ndarray, n: int) -> np.ndarray:
    """S[0] = sum(x[:n]); S[t] = S[t-1] * (1 - 1/n) + x[t]."""
    seed = float(np.sum(x[:n]))
    out = np.empty(x.size - n + 1)
    out[0] = seed
    rest = x[n:]
    if rest.size:
        decay = 1.0 - 1.0 / n
        zi = np.array([decay * seed])
        out[1:] = lfilter([1.0], [1.0, -decay], rest, zi=zi)[0]
    return out


def detect_concealing_baby_swallow(series: BarSeries, tol: float = 0.05) -> EventMask:
    """Flag the four-candle concealing-baby-swallow reversal pattern.

    The flag sits on the fourth candle. ``tol`` is the shadow tolerance as a
    fraction of body height for the "no shadow" clauses.
    """
    if not (0.0 <= tol < 0.5):
        raise ValueError("tol must be in [0, 0.5)")
    o, h, l, c = series.opens, series.highs, series.lows, series.closes
    body_top = np.maximum(o, c)
    body_bot = np.minimum(o, c)
    body = np.abs(c - o)
    upper = h - body_top
    lower = body_bot - l
    bearish = c < o

    flags = np.zeros(len(series), dtype=bool)
    if len(series) < 4:
        return EventMask("concealing_baby_swallow", flags)

    # candle 1: bearish marubozu (both shadows within tol of the body)
    c1 = bearish & (body > 0.0) & (upper <= tol * body) & (lower <= tol * body)
    # candle 2: bearish, opens inside candle 1's body, closes below its close
    c2 = np.zeros_like(c1)
    c2[1:] = bearish[1:] & (o[1:] >= body_bot[:-1]) & (o[1:] <= body_top[:-1]) & (c[1:] < c[:-1])
    # candle 3: opens below candle 2's close, upper shadow reaches into its
    # body, no lower shadow
    c3 = np.zeros_like(c1)
    c3[1:] = (o[1:] < c[:-1]) & (h[1:] > body_bot[:-1]) & (lower[1:] <= tol * body[1:])
    # candle 4: bearish body engulfing candle 3's full range, shadows included
    c4 = np.zeros_like(c1)
    c4[1:] = bearish[1:] & (body_top[1:] >= h[:-1]) & (body_bot[1:] <= l[:-1])

    flags[3:] = c1[:-3] & c2[1:-2] & c3[2:-1] & c4[3:]
    return EventMask("concealing_baby_swallow", flags)


def detect_oversold(
    rsi_col: IndicatorColumn, low_thresh: float = 30.0, high_thresh: float = 70.0
) -> tuple[EventMask, EventMask]:
    """Oversold (RSI <= low) and overbought (RSI >= high) masks; NaN is False."""
    if not low_thresh < high_thresh:
        raise ValueError("low_thresh must be below high_thresh")
    values = rsi_col.values
    with np.errstate(invalid="ignore"):
        oversold = values <= low_thresh
        overbought = values >= high_thresh
    return EventMask("oversold", oversold), EventMask("overbought", overbought)


def _build_sma(series, n):
    return [sma(series.closes, n)]


def _build_ema(series, n):
    return [ema(series.closes, n)]


def _build_rsi(series, n, method="simple"):
    return [rsi(series.closes, n, method=method)]


def _build_macd(series, fast=12, slow=26, signal_n=9, signal_mode="sma"):
    return list(macd(series.closes, fast, slow, signal_n, signal_mode))


def _build_bollinger(series, n):
    return list(bollinger(series.closes, n))


def _build_stochastic(series, n, d_n=3):
    return list(stochastic(series, n, d_n))


def _build_dmi(series, n):
    return list(dmi(series, n))


def _build_cbs(series, tol=0.05):
    mask = detect_concealing_baby_swallow(series, tol)
    return [IndicatorColumn("cbs_pattern", mask.flags.astype(np.float64), 0)]


def _build_oversold(series, n=14, low_thresh=30.0, high_thresh=70.0):
    col = rsi(series.closes, n)
    oversold, overbought = detect_oversold(col, low_thresh, high_thresh)
    # undefined RSI maps to False, so the event columns have no warmup
    return [
        IndicatorColumn(f"rsi{n}_oversold", oversold.flags.astype(np.float64), 0),
        IndicatorColumn(f"rsi{n}_overbought", overbought.flags.astype(np.float64), 0),
    ]


INDICATORS = {
    "sma": _build_sma,
    "ema": _build_ema,
    "rsi": _build_rsi,
    "macd": _build_macd,
    "bollinger": _build_bollinger,
    "stochastic": _build_stochastic,
    "dmi": _build_dmi,
    "cbs_pattern": _build_cbs,
    "oversold": _build_oversold,
}

_MA_WINDOWS = (2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 16, 18, 20, 24, 28, 32, 36, 40, 48, 60, 80, 100, 120)
_RSI_WINDOWS = (2, 3, 5, 7, 9, 11, 14, 18, 21, 25, 28, 35)
_BB_WINDOWS = (10, 14, 20, 26, 32, 40)
_STOCH_WINDOWS = (5, 7, 9, 11, 14, 18, 21, 28, 35)
_DMI_WINDOWS = (7, 10, 14, 20, 24, 28)


def default_feature_spec() -> list[tuple[str, dict]]:
    """The stock candidate pool: a parameter grid yielding 130+ columns."""
    spec: list[tuple[str, dict]] = []
    spec += [("sma", {"n": n}) for n in _MA_WINDOWS]
    spec += [("ema", {"n": n}) for n in _MA_WINDOWS]
    spec += [("rsi", {"n": n}) for n in _RSI_WINDOWS]
    spec += [("macd", {})]
    spec += [("bollinger", {"n": n}) for n in _BB_WINDOWS]
    spec += [("stochastic", {"n": n}) for n in _STOCH_WINDOWS]
    spec += [("dmi", {"n": n}) for n in _DMI_WINDOWS]
    spec += [("cbs_pattern", {}), ("oversold", {"n": 14})]
    return spec


class FeatureFrame:
    """Named indicator columns aligned to one BarSeries."""

    def __init__(self, series_ref: str, interval_minutes: int, timestamps, columns):
        self.series_ref = series_ref
        self.interval_minutes = interval_minutes
        self.timestamps = tuple(timestamps)
        self.columns: dict[str, IndicatorColumn] = {}
        for col in columns:
            if col.name in self.columns:
                raise ValueError(f"duplicate column name {col.name!r}")
            if len(col.values) != len(self.timestamps):
                raise ValueError(f"column {col.name!r} length mismatch")
            self.columns[col.name] = col

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def values(self, name: str) -> np.ndarray:
        try:
            return self.columns[name].values
        except KeyError:
            raise UnknownIndicator(f"no column named {name!r}") from None

    def warmup(self, names=None) -> int:
        names = self.names if names is None else names
        return max(self.columns[n].warmup for n in names) if names else 0

    def matrix(self, names) -> np.ndarray:
        return np.column_stack([self.values(n) for n in names])

    def to_csv(self) -> str:
        """One row per bar; warmup cells are left empty."""
        from .bars import format_timestamp

        lines = [",".join(["timestamp"] + self.names)]
        matrix = self.matrix(self.names)
        for i, ts in enumerate(self.timestamps):
            cells = [format_timestamp(ts)]
            for v in matrix[i]:
                cells.append("" if np.isnan(v) else repr(float(v)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def manifest(self) -> dict:
        return {
            "series_ref": self.series_ref,
            "interval_minutes": self.interval_minutes,
            "n_bars": len(self),
            "columns": [
                {"name": c.name, "warmup": c.warmup} for c in self.columns.values()
            ],
        }


def build_feature_frame(series: BarSeries, spec=None) -> FeatureFrame:
    """Compute raw OHLC columns plus one column per requested indicator output.

    ``spec`` is a list of (indicator name, params) pairs; None means OHLC only.
    """
    columns = [
        IndicatorColumn("open", series.opens, 0),
        IndicatorColumn("high", series.highs, 0),
        IndicatorColumn("low", series.lows, 0),
        IndicatorColumn("close", series.closes, 0),
    ]
    for entry in spec or []:
        name, params = entry
        try:
            builder = INDICATORS[name]
        except KeyError:
            raise UnknownIndicator(f"no indicator named {name!r}") from None
        columns.extend(builder(series, **params))
    ref = f"{series.symbol}@{series.interval_minutes}m"
    return FeatureFrame(ref, series.interval_minutes, series.timestamps, columns)
