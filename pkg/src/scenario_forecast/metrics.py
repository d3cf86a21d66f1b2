"""Forecast accuracy metrics and wall-clock timing helpers."""

from __future__ import annotations

import csv
import math
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

#: Observations with |value| at or below this are excluded from MAPE.
MAPE_FLOOR = 1e-9


@dataclass
class MetricReport:
    r2: float
    rmse: float
    mae: float
    mape: float | None  # None when every observation is ~0
    mse: float
    n_points: int
    mape_skipped: int = 0
    training_time: float | None = None

    def to_dict(self) -> dict:
        return {
            "r2": self.r2,
            "rmse": self.rmse,
            "mae": self.mae,
            "mape": self.mape,
            "mse": self.mse,
            "n_points": self.n_points,
            "mape_skipped": self.mape_skipped,
            "training_time": self.training_time,
        }


def compute_metrics(observed, predicted) -> MetricReport:
    """MSE/RMSE/MAE/MAPE/R^2 for one prediction series.

    MAPE skips near-zero observations and reports how many were skipped;
    R^2 is 1 - SS_res/SS_tot about the observed mean and is not clamped, so
    a predictor worse than the mean goes negative.
    """
    obs = np.asarray(observed, dtype=float)
    pred = np.asarray(predicted, dtype=float)
    if obs.shape != pred.shape or obs.ndim != 1:
        raise ValueError(f"length mismatch: {obs.shape} vs {pred.shape}")
    if obs.size == 0:
        raise ValueError("empty input")
    if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(pred))):
        raise ValueError("non-finite value in input")

    err = pred - obs
    mse = float(np.mean(err**2))
    mae = float(np.mean(np.abs(err)))

    mask = np.abs(obs) > MAPE_FLOOR
    skipped = int(obs.size - mask.sum())
    mape = (
        100.0 * float(np.mean(np.abs(err[mask]) / np.abs(obs[mask])))
        if mask.any()
        else None
    )

    ss_res = float(np.sum(err**2))
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    if ss_tot > 0.0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0.0 else -math.inf

    return MetricReport(
        r2=r2,
        rmse=math.sqrt(mse),
        mae=mae,
        mape=mape,
        mse=mse,
        n_points=int(obs.size),
        mape_skipped=skipped,
    )


class TimingLog:
    """Thread-safe accumulation of labelled wall-clock durations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict[str, float] = {}

    def add(self, label: str, seconds: float) -> None:
        with self._lock:
            self._entries[label] = self._entries.get(label, 0.0) + seconds

    def as_dict(self) -> dict:
        with self._lock:
            return dict(self._entries)


@dataclass
class BlockTimer:
    label: str
    elapsed: float = 0.0


@contextmanager
def time_block(label: str, log: TimingLog | None = None):
    """Measure a labelled phase on the monotonic clock.

    Yields a :class:`BlockTimer` whose ``elapsed`` is set on exit; the
    duration is also accumulated into ``log`` when one is given.
    """
    timer = BlockTimer(label)
    start = time.perf_counter()
    try:
        yield timer
    finally:
        timer.elapsed = time.perf_counter() - start
        if log is not None:
            log.add(label, timer.elapsed)


def write_metrics_csv(reports: dict, path) -> None:
    """Side-by-side metric table: one row per metric, one column per report."""
    path = Path(path)
    names = list(reports)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["metric", *names])
        for label, attr in (
            ("R2", "r2"),
            ("RMSE_C", "rmse"),
            ("MAE_C", "mae"),
            ("MAPE_pct", "mape"),
            ("MSE_C2", "mse"),
            ("n_points", "n_points"),
            ("mape_skipped", "mape_skipped"),
        ):
            row = [label]
            for name in names:
                value = getattr(reports[name], attr)
                row.append("" if value is None else repr(value) if isinstance(value, float) else str(value))
            writer.writerow(row)
