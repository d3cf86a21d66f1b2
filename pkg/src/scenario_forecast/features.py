"""Per-day feature extraction: statistical summaries plus DFT harmonics.

Each day window is reduced to a fixed-length vector so that days can be
compared with plain Euclidean distance.  The layout per configured channel
is ``max, min, mean, median, variance, std, amplitude`` followed by
``real_h, imag_h, phase_h`` for each retained harmonic ``h`` and, when more
than one harmonic is kept, the relative offsets ``phase_offset_h``
(``phase_h - h * phase_1`` wrapped to ``(-pi, pi]``) for ``h >= 2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import CHANNELS

STAT_KEYS = ("max", "min", "mean", "median", "variance", "std")


@dataclass(frozen=True)
class SpectralConfig:
    """How many non-DC DFT bins to keep and which channels to summarize."""

    harmonics: int = 3
    channels: tuple = ("indoor_temp", "hvac_power")

    def __post_init__(self):
        if self.harmonics < 1:
            raise ValueError("harmonics must be >= 1")
        object.__setattr__(self, "channels", tuple(self.channels))
        if not self.channels:
            raise ValueError("at least one channel is required")
        for ch in self.channels:
            if ch not in CHANNELS:
                raise ValueError(f"unknown channel {ch!r}")

    def feature_names(self) -> tuple:
        names = []
        for ch in self.channels:
            names.extend(f"{ch}.{key}" for key in STAT_KEYS)
            names.append(f"{ch}.amplitude")
            for h in range(1, self.harmonics + 1):
                names.extend((f"{ch}.real_{h}", f"{ch}.imag_{h}", f"{ch}.phase_{h}"))
            if self.harmonics >= 2:
                names.extend(
                    f"{ch}.phase_offset_{h}" for h in range(2, self.harmonics + 1)
                )
        return tuple(names)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    names: tuple
    values: np.ndarray
    source_date: object = None


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    names: tuple
    values: np.ndarray  # (n_windows, n_features)
    dates: tuple


@dataclass(frozen=True, eq=False)
class NormParams:
    """Per-column z-score parameters, retained for online application."""

    mean: np.ndarray
    std: np.ndarray
    names: tuple

    def apply(self, values) -> np.ndarray:
        x = np.asarray(values, dtype=float)
        if x.shape[-1] != self.mean.shape[0]:
            raise ValueError(
                f"feature dimension {x.shape[-1]} does not match stored params "
                f"({self.mean.shape[0]})"
            )
        centered = x - self.mean
        with np.errstate(divide="ignore", invalid="ignore"):
            z = centered / self.std
        return np.where(self.std > 0, z, 0.0)


def extract_statistical(channel) -> dict:
    """max/min/mean/median/variance/std with population (divide-by-W) variance."""
    x = np.asarray(channel, dtype=float)
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in channel")
    variance = float(np.var(x))
    return {
        "max": float(np.max(x)),
        "min": float(np.min(x)),
        "mean": float(np.mean(x)),
        "median": float(np.median(x)),
        "variance": variance,
        "std": math.sqrt(variance),
    }


def _wrap_phase(value: float) -> float:
    """Wrap to (-pi, pi]."""
    w = (value + math.pi) % (2.0 * math.pi) - math.pi
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


def extract_spectral(channel, config: SpectralConfig) -> dict:
    """DFT features of the mean-removed channel.

    Uses the forward e^{-i 2 pi j h / W} transform; ``amplitude`` is
    2/W times the magnitude of the largest non-DC bin, so a unit-amplitude
    pure sinusoid at an integer frequency scores 1.
    """
    x = np.asarray(channel, dtype=float)
    w = x.size
    if w < 2 * config.harmonics:
        raise ValueError(f"window of {w} samples too short for {config.harmonics} harmonics")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value in channel")

    spectrum = np.fft.rfft(x - x.mean())
    out = {"amplitude": 2.0 / w * float(np.max(np.abs(spectrum[1:])))}
    phases = {}
    for h in range(1, config.harmonics + 1):
        re = float(spectrum[h].real)
        im = float(spectrum[h].imag)
        phases[h] = math.atan2(im, re)
        out[f"real_{h}"] = re
        out[f"imag_{h}"] = im
        out[f"phase_{h}"] = phases[h]
    if config.harmonics >= 2:
        for h in range(2, config.harmonics + 1):
            out[f"phase_offset_{h}"] = _wrap_phase(phases[h] - h * phases[1])
    return out


def extract_features(window, config: SpectralConfig) -> FeatureVector:
    names = config.feature_names()
    values = []
    for ch in config.channels:
        data = window.channel(ch)
        stats = extract_statistical(data)
        values.extend(stats[key] for key in STAT_KEYS)
        spectral = extract_spectral(data, config)
        values.append(spectral["amplitude"])
        for h in range(1, config.harmonics + 1):
            values.extend(
                (spectral[f"real_{h}"], spectral[f"imag_{h}"], spectral[f"phase_{h}"])
            )
        if config.harmonics >= 2:
            values.extend(
                spectral[f"phase_offset_{h}"] for h in range(2, config.harmonics + 1)
            )
    vec = np.array(values, dtype=float)
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"non-finite feature for day {window.date}")
    return FeatureVector(names, vec, window.date)


def build_feature_matrix(windows, config: SpectralConfig) -> FeatureMatrix:
    """One feature row per window, assembled in window order."""
    windows = list(windows)
    if not windows:
        raise ValueError("need at least one window")
    rows = [extract_features(w, config) for w in windows]
    values = np.vstack([r.values for r in rows])
    return FeatureMatrix(rows[0].names, values, tuple(w.date for w in windows))


def normalize_features(matrix: FeatureMatrix):
    """Z-score each column; zero-variance columns map to all zeros."""
    if matrix.values.shape[0] < 2:
        raise ValueError("need at least 2 rows to normalize")
    mean = matrix.values.mean(axis=0)
    std = matrix.values.std(axis=0)  # population
    params = NormParams(mean, std, matrix.names)
    return FeatureMatrix(matrix.names, params.apply(matrix.values), matrix.dates), params


def write_feature_csv(matrix: FeatureMatrix, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["date", *matrix.names])
        for day, row in zip(matrix.dates, matrix.values):
            writer.writerow([day.isoformat(), *[repr(float(v)) for v in row]])
