"""Sensor-log ingestion: CSV parsing, grid regularization, gap filling and
day segmentation.

The normal pipeline is::

    parse_sensor_csv -> resample_to_grid -> fill_gaps -> segment_into_days
                     -> split_train_test

All functions are pure: they return new tables and never mutate their
inputs.  Timestamps are handled as naive local civil time throughout; days
that end up with duplicated or missing grid steps (e.g. daylight-saving
transitions) simply fail the completeness check and are dropped.
"""

from __future__ import annotations

import csv
import math
from bisect import bisect_left
from dataclasses import dataclass, replace
from datetime import date, datetime, time, timedelta
from fractions import Fraction
from pathlib import Path

import numpy as np

#: Channel attribute names on :class:`SensorRecord`, in canonical order.
CHANNELS = ("indoor_temp", "outdoor_temp", "hvac_power")

#: Default mapping from logical channel names to CSV column names.
DEFAULT_SCHEMA = {
    "time": "time",
    "indoor_temp": "indoor_temp_c",
    "outdoor_temp": "outdoor_temp_c",
    "hvac_power": "hvac_power_w",
}

_SLASH_FORMATS = ("%m/%d/%Y %H:%M", "%m/%d/%Y %H:%M:%S")


class IngestError(ValueError):
    """Unreadable file, missing column, or a malformed/out-of-domain cell."""


@dataclass(frozen=True)
class SensorRecord:
    """One timestamped observation.  Gap placeholders hold NaN everywhere."""

    timestamp: datetime
    indoor_temp: float
    outdoor_temp: float
    hvac_power: float

    @property
    def is_gap(self) -> bool:
        return math.isnan(self.indoor_temp)


def _gap_record(ts: datetime) -> SensorRecord:
    return SensorRecord(ts, math.nan, math.nan, math.nan)


@dataclass(frozen=True)
class TimeSeriesTable:
    """An ordered sequence of records plus the nominal grid interval.

    ``invalid_dates`` collects days ruined by gaps too long to interpolate;
    :func:`segment_into_days` drops them.
    """

    records: tuple[SensorRecord, ...]
    interval: int = 5
    invalid_dates: frozenset = frozenset()

    def __len__(self) -> int:
        return len(self.records)

    def channel(self, name: str) -> np.ndarray:
        if name not in CHANNELS:
            raise ValueError(f"unknown channel {name!r}")
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def timestamps(self) -> list[datetime]:
        return [r.timestamp for r in self.records]

    def is_on_grid(self) -> bool:
        step = timedelta(minutes=self.interval)
        return all(
            b.timestamp - a.timestamp == step
            for a, b in zip(self.records, self.records[1:])
        )


@dataclass(frozen=True)
class DayWindow:
    """One complete calendar day on the grid; the clustering/forecast unit."""

    date: date
    records: tuple[SensorRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def channel(self, name: str) -> np.ndarray:
        if name not in CHANNELS:
            raise ValueError(f"unknown channel {name!r}")
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def interval_minutes(self) -> int:
        return 1440 // len(self.records)


def _parse_timestamp(text: str) -> datetime:
    text = text.strip()
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        pass
    for fmt in _SLASH_FORMATS:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ValueError(f"unparseable timestamp {text!r}")


def _parse_float(text: str, what: str) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise ValueError(f"unparseable {what} {text!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"non-finite {what} {text!r}")
    return value


def parse_sensor_csv(path, schema=None, interval: int = 5) -> TimeSeriesTable:
    """Read a raw sensor log into a table sorted by timestamp.

    ``schema`` maps the logical names ``time``, ``indoor_temp``,
    ``outdoor_temp`` and ``hvac_power`` to the file's column headers
    (defaults: :data:`DEFAULT_SCHEMA`).  Duplicate timestamps are collapsed
    keeping the last occurrence, so later sensor writes supersede earlier
    ones.  Cell errors report the 1-based CSV row (header is row 1).
    """
    path = Path(path)
    columns = dict(DEFAULT_SCHEMA)
    columns.update(schema or {})
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as err:
        raise IngestError(f"cannot read {path}: {err}") from err

    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise IngestError(f"{path}: empty file, expected a header row")
        header = [name.strip() for name in reader.fieldnames]
        missing = [columns[key] for key in columns if columns[key] not in header]
        if missing:
            raise IngestError(f"{path}: missing required column(s) {missing}")

        by_timestamp: dict[datetime, SensorRecord] = {}
        for row_no, row in enumerate(reader, start=2):
            cells = {k.strip(): (v or "") for k, v in row.items() if k is not None}
            try:
                ts = _parse_timestamp(cells[columns["time"]])
                indoor = _parse_float(cells[columns["indoor_temp"]], "indoor temperature")
                outdoor = _parse_float(cells[columns["outdoor_temp"]], "outdoor temperature")
                power = _parse_float(cells[columns["hvac_power"]], "HVAC power")
                if power < 0:
                    raise ValueError(f"negative HVAC power {power}")
            except ValueError as err:
                raise IngestError(f"{path} row {row_no}: {err}") from None
            by_timestamp[ts] = SensorRecord(ts, indoor, outdoor, power)

    records = tuple(by_timestamp[ts] for ts in sorted(by_timestamp))
    return TimeSeriesTable(records, interval=interval)


def resample_to_grid(table: TimeSeriesTable, interval: int | None = None) -> TimeSeriesTable:
    """Snap records onto an exact midnight-anchored grid.

    Grid points run from the first multiple of ``interval`` at or after the
    first record to the last multiple at or before the last record.  Each
    grid point takes the record nearest in time within half an interval
    (ties prefer the later record); uncovered points become NaN gap
    placeholders for :func:`fill_gaps`.
    """
    if not table.records:
        raise ValueError("cannot resample an empty table")
    step = int(interval or table.interval)
    if step < 1:
        raise ValueError("interval must be >= 1 minute")
    step_s = step * 60
    half_s = step_s // 2

    ref = datetime.combine(table.records[0].timestamp.date(), time.min)
    secs = [int((r.timestamp - ref).total_seconds()) for r in table.records]
    if any(b <= a for a, b in zip(secs, secs[1:])):
        raise ValueError("records must be strictly increasing in time")

    start = math.ceil(secs[0] / step_s) * step_s
    stop = math.floor(secs[-1] / step_s) * step_s

    out = []
    for g in range(start, stop + 1, step_s):
        i = bisect_left(secs, g)
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(secs):
                d = abs(secs[j] - g)
                # ties prefer the later record, hence <=
                if d <= half_s and (best is None or d <= best[0]):
                    best = (d, j)
        ts = ref + timedelta(seconds=g)
        if best is None:
            out.append(_gap_record(ts))
        else:
            out.append(replace(table.records[best[1]], timestamp=ts))
    return TimeSeriesTable(tuple(out), interval=step, invalid_dates=table.invalid_dates)


def fill_gaps(table: TimeSeriesTable, max_gap: int = 6) -> TimeSeriesTable:
    """Linearly interpolate gap runs of at most ``max_gap`` steps per channel.

    Longer runs, and runs touching the table boundary (no anchor on one
    side), are left unfilled and mark every date they cover as invalid.
    """
    records = list(table.records)
    invalid = set(table.invalid_dates)

    i = 0
    while i < len(records):
        if not records[i].is_gap:
            i += 1
            continue
        j = i
        while j < len(records) and records[j].is_gap:
            j += 1
        run = j - i
        if i == 0 or j == len(records) or run > max_gap:
            invalid.update(records[p].timestamp.date() for p in range(i, j))
        else:
            left, right = records[i - 1], records[j]
            for p in range(run):
                frac_num, frac_den = p + 1, run + 1
                values = {
                    ch: getattr(left, ch)
                    + (getattr(right, ch) - getattr(left, ch)) * frac_num / frac_den
                    for ch in CHANNELS
                }
                records[i + p] = SensorRecord(records[i + p].timestamp, **values)
        i = j

    return TimeSeriesTable(tuple(records), table.interval, frozenset(invalid))


def segment_into_days(table: TimeSeriesTable):
    """Split a gridded table into complete day windows.

    Returns ``(windows, drops)`` where ``drops`` is a list of
    ``(date, reason)`` pairs for every partial or invalid day.
    """
    if 1440 % table.interval != 0:
        raise ValueError(f"interval {table.interval} does not divide a day")
    steps_per_day = 1440 // table.interval

    by_date: dict[date, list[SensorRecord]] = {}
    for record in table.records:
        by_date.setdefault(record.timestamp.date(), []).append(record)

    windows: list[DayWindow] = []
    drops: list[tuple[date, str]] = []
    for day in sorted(by_date):
        recs = by_date[day]
        if day in table.invalid_dates:
            drops.append((day, "invalid: gap longer than permitted or at data boundary"))
        elif any(r.is_gap for r in recs):
            drops.append((day, "invalid: unfilled gap"))
        elif len(recs) != steps_per_day:
            drops.append((day, f"partial: {len(recs)}/{steps_per_day} steps"))
        elif recs[0].timestamp.time() != time.min:
            drops.append((day, "partial: does not start at midnight"))
        else:
            windows.append(DayWindow(day, tuple(recs)))
    return windows, drops


def split_train_test(windows, ratio: float):
    """Chronological split: the earliest ``ceil(ratio * N)`` days train.

    No shuffling, so no future data can leak into the training side.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    windows = sorted(windows, key=lambda w: w.date)
    n = len(windows)
    if n < 2:
        raise ValueError(f"need at least 2 day windows to split, got {n}")
    # Exact rational ceil so 0.8 * 10 is 8 train days, never 9.
    frac = Fraction(str(ratio))
    n_train = -((-frac.numerator * n) // frac.denominator)
    return windows[:n_train], windows[n_train:]


def windows_contiguous(windows) -> bool:
    """True when the windows cover consecutive calendar dates."""
    return all(
        (b.date - a.date) == timedelta(days=1) for a, b in zip(windows, windows[1:])
    )


def write_table_csv(table: TimeSeriesTable, path, skip_gaps: bool = True) -> None:
    """Re-emit a table as CSV with ISO-8601 timestamps and default headers."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([DEFAULT_SCHEMA[k] for k in ("time", *CHANNELS)])
        for r in table.records:
            if r.is_gap and skip_gaps:
                continue
            writer.writerow(
                [r.timestamp.isoformat(), repr(r.indoor_temp), repr(r.outdoor_temp), repr(r.hvac_power)]
            )


def format_drop_report(drops) -> str:
    """One line per dropped day, e.g. ``2022-07-12: partial: 150/288 steps``."""
    return "".join(f"{day.isoformat()}: {reason}\n" for day, reason in drops)
