"""OHLC bar ingestion, validation and leakage-safe train/test splitting.

Bars are immutable once constructed and every constructor enforces the
structural invariants (positive prices, low <= open/close <= high, strictly
increasing timestamps on a fixed-interval grid). Market-closure gaps are kept
as-is; downstream indicator code treats the series as index-contiguous.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import (
    DuplicateTimestamp,
    EmptyPartition,
    InvariantViolation,
    MalformedRow,
)

CSV_COLUMNS = ("timestamp", "open", "high", "low", "close")
CSV_COLUMNS_WITH_VOLUME = CSV_COLUMNS + ("volume",)


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 string or epoch-seconds number into a UTC datetime.

    Naive inputs are assumed to already be UTC.
    """
    text = text.strip()
    try:
        dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        try:
            dt = datetime.fromtimestamp(float(text), tz=timezone.utc)
        except (ValueError, OverflowError, OSError):
            raise ValueError(f"unparseable timestamp: {text!r}") from None
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class Bar:
    """One fixed-interval OHLC bar. Volume is optional and unused downstream."""

    timestamp: datetime
    open: float
    high: float
    low: float
    close: float
    volume: float | None = None

    def __post_init__(self):
        if self.timestamp.tzinfo is None:
            object.__setattr__(self, "timestamp", self.timestamp.replace(tzinfo=timezone.utc))
        for name in ("open", "high", "low", "close"):
            price = getattr(self, name)
            if not np.isfinite(price) or price <= 0:
                raise InvariantViolation(f"{name} must be a positive finite price, got {price}")
        if self.low > self.high:
            raise InvariantViolation(f"low {self.low} > high {self.high}")
        if not (self.low <= self.open <= self.high):
            raise InvariantViolation(f"open {self.open} outside [{self.low}, {self.high}]")
        if not (self.low <= self.close <= self.high):
            raise InvariantViolation(f"close {self.close} outside [{self.low}, {self.high}]")
        if self.volume is not None and (not np.isfinite(self.volume) or self.volume < 0):
            raise InvariantViolation(f"volume must be non-negative, got {self.volume}")


@dataclass(frozen=True)
class BarSeries:
    """A time-ordered run of bars for one symbol at a fixed interval."""

    symbol: str
    interval_minutes: int
    bars: tuple[Bar, ...]

    def __post_init__(self):
        if self.interval_minutes <= 0:
            raise InvariantViolation("interval_minutes must be positive")
        object.__setattr__(self, "bars", tuple(self.bars))
        step = timedelta(minutes=self.interval_minutes)
        for prev, cur in zip(self.bars, self.bars[1:]):
            delta = cur.timestamp - prev.timestamp
            if delta <= timedelta(0):
                if delta == timedelta(0):
                    raise DuplicateTimestamp(f"duplicate timestamp {prev.timestamp}")
                raise InvariantViolation(
                    f"timestamps not increasing at {cur.timestamp}"
                )
            if (delta % step) != timedelta(0):
                raise InvariantViolation(
                    f"delta {delta} at {cur.timestamp} is not a multiple of "
                    f"{self.interval_minutes} minutes"
                )

    def __len__(self) -> int:
        return len(self.bars)

    def __iter__(self):
        return iter(self.bars)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return BarSeries(self.symbol, self.interval_minutes, self.bars[index])
        return self.bars[index]

    @cached_property
    def timestamps(self) -> tuple[datetime, ...]:
        return tuple(b.timestamp for b in self.bars)

    @cached_property
    def opens(self) -> np.ndarray:
        return np.array([b.open for b in self.bars], dtype=np.float64)

    @cached_property
    def highs(self) -> np.ndarray:
        return np.array([b.high for b in self.bars], dtype=np.float64)

    @cached_property
    def lows(self) -> np.ndarray:
        return np.array([b.low for b in self.bars], dtype=np.float64)

    @cached_property
    def closes(self) -> np.ndarray:
        return np.array([b.close for b in self.bars], dtype=np.float64)

    def index_of(self, ts: datetime) -> int | None:
        """Index of the bar at exactly ``ts``, or None."""
        lo, hi = 0, len(self.bars)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.bars[mid].timestamp < ts:
                lo = mid + 1
            else:
                hi = mid
        if lo < len(self.bars) and self.bars[lo].timestamp == ts:
            return lo
        return None


@dataclass(frozen=True)
class SplitSpec:
    """How to cut a series into train/test with a leakage gap.

    Ratio mode takes the first floor(N * train_fraction) bars as train and
    drops test bars that fall inside the gap. Date mode keeps bars at or
    before train_end / at or after test_start.
    """

    mode: str = "by-ratio"
    train_fraction: float = 0.8
    train_end: datetime | None = None
    test_start: datetime | None = None
    gap_hours: float = 0.0

    def __post_init__(self):
        if self.mode not in ("by-ratio", "by-date"):
            raise InvariantViolation(f"unknown split mode {self.mode!r}")
        if self.gap_hours < 0:
            raise InvariantViolation("gap_hours must be non-negative")
        if self.mode == "by-ratio":
            if not (0.0 < self.train_fraction < 1.0):
                raise InvariantViolation("train_fraction must be in (0, 1)")
        else:
            if self.train_end is None or self.test_start is None:
                raise InvariantViolation("date mode needs train_end and test_start")
            if self.test_start - self.train_end < timedelta(hours=self.gap_hours):
                raise InvariantViolation(
                    "test_start - train_end is smaller than the configured gap"
                )


@dataclass
class GapEntry:
    start: datetime
    end: datetime
    missing_bars: int


@dataclass
class ValidationReport:
    """Report-only result of scanning a bar sequence; never raises."""

    gaps: list[GapEntry] = field(default_factory=list)
    duplicates: list[datetime] = field(default_factory=list)
    breaches: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.duplicates or self.breaches)

    def to_text(self) -> str:
        lines = []
        for gap in self.gaps:
            lines.append(
                f"gap: {format_timestamp(gap.start)} -> {format_timestamp(gap.end)}"
                f" ({gap.missing_bars} missing bars)"
            )
        for ts in self.duplicates:
            lines.append(f"duplicate timestamp: {format_timestamp(ts)}")
        for breach in self.breaches:
            lines.append(f"breach: {breach}")
        if not lines:
            lines.append("ok: no gaps, duplicates or breaches")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "gaps": [
                {
                    "start": format_timestamp(g.start),
                    "end": format_timestamp(g.end),
                    "missing_bars": g.missing_bars,
                }
                for g in self.gaps
            ],
            "duplicates": [format_timestamp(t) for t in self.duplicates],
            "breaches": list(self.breaches),
        }


def validate_bars(bars: Sequence[Bar], interval_minutes: int) -> ValidationReport:
    """Scan an (already parsed, possibly unordered) bar sequence.

    Reports gaps, duplicate timestamps and grid breaches without raising, so
    callers can decide whether an issue is fatal.
    """
    report = ValidationReport()
    step = timedelta(minutes=interval_minutes)
    ordered = sorted(bars, key=lambda b: b.timestamp)
    for prev, cur in zip(ordered, ordered[1:]):
        delta = cur.timestamp - prev.timestamp
        if delta == timedelta(0):
            report.duplicates.append(cur.timestamp)
            continue
        if (delta % step) != timedelta(0):
            report.breaches.append(
                f"delta {delta} at {format_timestamp(cur.timestamp)} is not a "
                f"multiple of {interval_minutes} minutes"
            )
        elif delta > step:
            report.gaps.append(
                GapEntry(prev.timestamp, cur.timestamp, delta // step - 1)
            )
    return report


def validate_series(series: BarSeries) -> ValidationReport:
    """Report gaps in a constructed series (its invariants already hold)."""
    return validate_bars(series.bars, series.interval_minutes)


def _coerce_text(stream) -> io.TextIOBase:
    if isinstance(stream, bytes):
        return io.StringIO(stream.decode("utf-8"))
    if isinstance(stream, str):
        return io.StringIO(stream)
    if isinstance(stream, io.TextIOBase):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8")


def parse_csv(stream, interval_minutes: int, symbol: str = "UNKNOWN") -> BarSeries:
    """Parse header-prefixed OHLC CSV into a sorted, validated BarSeries.

    Accepts bytes, str or a file-like object. Rows may be out of order; the
    output is sorted. Malformed rows raise MalformedRow with the 1-based line
    number, invariant breaches raise InvariantViolation naming the row, and
    duplicate timestamps raise DuplicateTimestamp.
    """
    if interval_minutes <= 0:
        raise InvariantViolation("interval_minutes must be positive")
    text = _coerce_text(stream)
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow(1, "empty file, header row required") from None
    header = tuple(h.strip().lower() for h in header)
    if header not in (CSV_COLUMNS, CSV_COLUMNS_WITH_VOLUME):
        raise MalformedRow(1, f"unexpected header {','.join(header)!r}")
    has_volume = header == CSV_COLUMNS_WITH_VOLUME

    bars: list[Bar] = []
    for line_no, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise MalformedRow(line_no, f"expected {len(header)} fields, got {len(row)}")
        try:
            ts = parse_timestamp(row[0])
            prices = [float(v) for v in row[1:5]]
            volume = float(row[5]) if has_volume and row[5].strip() != "" else None
        except ValueError as exc:
            raise MalformedRow(line_no, str(exc)) from None
        try:
            bars.append(Bar(ts, *prices, volume=volume))
        except InvariantViolation as exc:
            raise InvariantViolation(f"line {line_no}: {exc}") from None

    if not bars:
        raise MalformedRow(2, "no data rows")
    bars.sort(key=lambda b: b.timestamp)
    for prev, cur in zip(bars, bars[1:]):
        if prev.timestamp == cur.timestamp:
            raise DuplicateTimestamp(
                f"duplicate timestamp {format_timestamp(cur.timestamp)}"
            )
    return BarSeries(symbol=symbol, interval_minutes=interval_minutes, bars=tuple(bars))


def serialize_csv(series: BarSeries) -> str:
    """Write a series back to the canonical CSV dialect (round-trips exactly)."""
    has_volume = any(b.volume is not None for b in series.bars)
    columns = CSV_COLUMNS_WITH_VOLUME if has_volume else CSV_COLUMNS
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for bar in series.bars:
        row = [format_timestamp(bar.timestamp), repr(bar.open), repr(bar.high),
               repr(bar.low), repr(bar.close)]
        if has_volume:
            row.append("" if bar.volume is None else repr(bar.volume))
        writer.writerow(row)
    return out.getvalue()


def split_with_gap(series: BarSeries, spec: SplitSpec) -> tuple[BarSeries, BarSeries]:
    """Cut a series into (train, test) so no test bar sits inside the gap.

    Post-condition: max(train timestamps) + gap_hours <= min(test timestamps).
    """
    gap = timedelta(hours=spec.gap_hours)
    if spec.mode == "by-ratio":
        n_train = int(len(series) * spec.train_fraction)
        train_bars = series.bars[:n_train]
        if not train_bars:
            raise EmptyPartition("train side is empty")
        cutoff = train_bars[-1].timestamp + gap
        test_bars = tuple(b for b in series.bars[n_train:] if b.timestamp >= cutoff)
    else:
        train_bars = tuple(b for b in series.bars if b.timestamp <= spec.train_end)
        test_bars = tuple(b for b in series.bars if b.timestamp >= spec.test_start)
    if not train_bars:
        raise EmptyPartition("train side is empty")
    if not test_bars:
        raise EmptyPartition("gap consumed the test side")
    train = BarSeries(series.symbol, series.interval_minutes, tuple(train_bars))
    test = BarSeries(series.symbol, series.interval_minutes, test_bars)
    return train, test
