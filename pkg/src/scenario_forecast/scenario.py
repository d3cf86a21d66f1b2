"""Scenario-library orchestration.

Ties the pipeline together: cluster day windows into operating scenarios,
evolve one expression per scenario, assign fresh days to scenarios, refit
constants on recent data, and roll a model forward for one-day-ahead
forecasts.  A :class:`ScenarioLibrary` is immutable; updates return new
libraries, so concurrent readers never need locks.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from datetime import date, datetime, time as time_of_day, timedelta
from pathlib import Path

import numpy as np

from .cluster import ClusteringError, ClusterModel, assign_nearest, kmeans_fit, select_k
from .features import (
    FeatureMatrix,
    NormParams,
    SpectralConfig,
    build_feature_matrix,
    extract_features,
    normalize_features,
)
from .ingest import CHANNELS, DayWindow
from .metrics import MetricReport, compute_metrics
from .sr_engine import (
    GpConfig,
    LagSnapshot,
    MergedTrainingSet,
    build_training_set,
    evaluate_expression,
    format_expression,
    parse_expression,
    refit_constants,
    run_evolution,
    training_mse,
    validate_expression,
)

logger = logging.getLogger(__name__)

LIBRARY_FORMAT = "scenario-library/1"

#: Structure used when a cluster has no trainable history: pure persistence.
FALLBACK_EXPRESSION = "Tin[t-1]"


class TrainingError(RuntimeError):
    """No cluster could be trained at all."""


class PredictionError(RuntimeError):
    """Missing history or exogenous data for the requested forecast."""


@dataclass(frozen=True, eq=False)
class ScenarioModel:
    cluster_id: int
    expression: object
    training_mse: float
    trained_on: tuple
    untrainable: bool = False


@dataclass(frozen=True, eq=False)
class ScenarioLibrary:
    mode: str
    cluster_model: ClusterModel
    norm_params: NormParams
    spectral: SpectralConfig
    lag_budget: int
    models: tuple

    def model_for(self, cluster_id: int) -> ScenarioModel:
        if not 0 <= cluster_id < len(self.models):
            raise ValueError(f"cluster {cluster_id} out of range")
        return self.models[cluster_id]


@dataclass(frozen=True)
class ClusterTrainingRecord:
    cluster_id: int
    status: str  # "trained" | "fallback"
    expression: str
    training_mse: float | None
    n_days: int
    n_rows: int
    seconds: float


@dataclass(frozen=True)
class TrainingReport:
    mode: str
    k: int
    selected_by: str  # "silhouette" | "degenerate-fallback"
    silhouette_curve: tuple
    records: tuple
    total_seconds: float


@dataclass(frozen=True, eq=False)
class ForecastResult:
    """One forecast day: exactly one entry per grid step."""

    date: date
    cluster_id: int
    timestamps: tuple
    predicted: np.ndarray
    observed: np.ndarray | None = None

    @property
    def abs_error(self) -> np.ndarray | None:
        if self.observed is None:
            return None
        return np.abs(self.predicted - self.observed)


def _contiguous_runs(windows):
    runs = []
    current = []
    for w in sorted(windows, key=lambda w: w.date):
        if current and (w.date - current[-1].date) != timedelta(days=1):
            runs.append(current)
            current = []
        current.append(w)
    if current:
        runs.append(current)
    return runs


def _cluster_seed(base_seed: int, cluster_id: int) -> int:
    return int(np.random.SeedSequence([base_seed, cluster_id]).generate_state(1)[0])


def train_library(windows, mode: str, spectral: SpectralConfig | None = None,
                  k_min: int = 2, k_max: int = 8, gp: GpConfig | None = None,
                  seed: int = 0, n_restarts: int = 10, max_iter: int = 300):
    """Cluster the training days and evolve one model per cluster.

    Returns ``(library, report)``; the report carries per-cluster status and
    wall times.  Clusters without a contiguous run longer than the lag
    budget fall back to a persistence model and are flagged ``fallback``.
    When every day is identical the silhouette search degenerates, so the
    library collapses to a single cluster.
    """
    spectral = spectral or SpectralConfig()
    gp = gp or GpConfig(seed=seed)
    windows = sorted(windows, key=lambda w: w.date)
    if len(windows) < k_min + 1:
        raise ClusteringError(
            f"need at least k_min + 1 = {k_min + 1} valid day windows, got {len(windows)}"
        )

    started = time.perf_counter()
    matrix = build_feature_matrix(windows, spectral)
    normalized, params = normalize_features(matrix)

    if bool(np.all(matrix.values == matrix.values[0])):
        cluster_model = kmeans_fit(normalized.values, 1, seed=seed,
                                   max_iter=max_iter, n_restarts=n_restarts)
        curve = ()
        selected_by = "degenerate-fallback"
        logger.warning("all %d day windows are identical; collapsing to k=1", len(windows))
    else:
        best_k, curve_list = select_k(
            normalized.values, k_min, min(k_max, len(windows) - 1),
            seed=seed, max_iter=max_iter, n_restarts=n_restarts,
        )
        cluster_model = kmeans_fit(normalized.values, best_k, seed=seed,
                                   max_iter=max_iter, n_restarts=n_restarts)
        curve = tuple(curve_list)
        selected_by = "silhouette"

    models = []
    records = []
    for cluster_id in range(cluster_model.k):
        member_windows = [
            w for w, a in zip(windows, cluster_model.assignments) if a == cluster_id
        ]
        runs = _contiguous_runs(member_windows)
        sets = []
        for run in runs:
            total_steps = sum(len(w) for w in run)
            if total_steps > gp.max_lag:
                sets.append(build_training_set(run, gp.max_lag))

        t0 = time.perf_counter()
        if not sets:
            expr = parse_expression(FALLBACK_EXPRESSION)
            model = ScenarioModel(
                cluster_id=cluster_id,
                expression=expr,
                training_mse=float("nan"),
                trained_on=tuple(w.date for w in member_windows),
                untrainable=True,
            )
            logger.warning(
                "cluster %d has no contiguous run longer than %d steps; "
                "falling back to persistence model %s",
                cluster_id, gp.max_lag, FALLBACK_EXPRESSION,
            )
            records.append(ClusterTrainingRecord(
                cluster_id, "fallback", FALLBACK_EXPRESSION, None,
                len(member_windows), 0, time.perf_counter() - t0,
            ))
        else:
            data = MergedTrainingSet(sets) if len(sets) > 1 else sets[0]
            cluster_gp = replace(gp, seed=_cluster_seed(gp.seed, cluster_id))
            best, _history = run_evolution(data, cluster_gp)
            best = refit_constants(best, data)
            mse = training_mse(best, data)
            model = ScenarioModel(
                cluster_id=cluster_id,
                expression=best,
                training_mse=mse,
                trained_on=tuple(w.date for w in member_windows),
            )
            records.append(ClusterTrainingRecord(
                cluster_id, "trained", format_expression(best), mse,
                len(member_windows), data.n_rows, time.perf_counter() - t0,
            ))
        models.append(model)

    library = ScenarioLibrary(
        mode=mode,
        cluster_model=cluster_model,
        norm_params=params,
        spectral=spectral,
        lag_budget=gp.max_lag,
        models=tuple(models),
    )
    report = TrainingReport(
        mode=mode,
        k=cluster_model.k,
        selected_by=selected_by,
        silhouette_curve=curve,
        records=tuple(records),
        total_seconds=time.perf_counter() - started,
    )
    return library, report


def assign_online_day(library: ScenarioLibrary, window: DayWindow) -> int:
    """Scenario index for one day window, using the stored feature pipeline."""
    feature = extract_features(window, library.spectral)
    return assign_nearest(library.cluster_model, feature, library.norm_params)


def refit_online(library: ScenarioLibrary, cluster_id: int, recent_windows) -> ScenarioLibrary:
    """Refit one model's constants against recent contiguous days.

    The input library is untouched; a new library holding the refitted
    model is returned.
    """
    model = library.model_for(cluster_id)
    data = build_training_set(recent_windows, library.lag_budget)
    refitted = refit_constants(model.expression, data)
    new_model = replace(
        model,
        expression=refitted,
        training_mse=training_mse(refitted, data),
        trained_on=tuple(w.date for w in recent_windows),
    )
    models = list(library.models)
    models[cluster_id] = new_model
    return replace(library, models=tuple(models))


def _stacked_channels(windows) -> dict:
    return {ch: np.concatenate([w.channel(ch) for w in windows]) for ch in CHANNELS}


def forecast_one_day(library: ScenarioLibrary, history, outdoor, power,
                     target_date: date | None = None, observed=None) -> ForecastResult:
    """Recursive one-day-ahead rollout.

    ``history`` is a contiguous run of day windows ending the day before the
    forecast; ``outdoor``/``power`` supply the exogenous series for every
    step of the forecast day.  Indoor-temperature lags that land inside the
    forecast day read previously predicted values; everything earlier reads
    history.
    """
    history = sorted(history, key=lambda w: w.date)
    if not history:
        raise PredictionError("no history windows supplied")
    for a, b in zip(history, history[1:]):
        if (b.date - a.date) != timedelta(days=1):
            raise PredictionError(f"history not contiguous between {a.date} and {b.date}")
    if target_date is None:
        target_date = history[-1].date + timedelta(days=1)
    if history[-1].date + timedelta(days=1) != target_date:
        raise PredictionError(
            f"history ends {history[-1].date}, cannot forecast {target_date}"
        )

    steps = len(history[-1])
    outdoor = np.asarray(outdoor, dtype=float)
    power = np.asarray(power, dtype=float)
    if outdoor.shape != (steps,) or power.shape != (steps,):
        raise PredictionError(
            f"exogenous series must cover all {steps} steps of {target_date}"
        )
    if not (np.all(np.isfinite(outdoor)) and np.all(np.isfinite(power))):
        raise PredictionError("exogenous series contain non-finite values")

    n = library.lag_budget
    stacked = _stacked_channels(history)
    if stacked["indoor_temp"].size < n:
        raise PredictionError(
            f"history supplies {stacked['indoor_temp'].size} steps; need {n}"
        )

    cluster_id = assign_online_day(library, history[-1])
    expr = library.model_for(cluster_id).expression
    validate_expression(expr, n)

    buffers = {
        "indoor_temp": np.concatenate([stacked["indoor_temp"][-n:], np.empty(steps)]),
        "outdoor_temp": np.concatenate([stacked["outdoor_temp"][-n:], outdoor]),
        "hvac_power": np.concatenate([stacked["hvac_power"][-n:], power]),
    }
    predictions = np.empty(steps)
    for s in range(steps):
        value = evaluate_expression(expr, LagSnapshot(buffers, n + s))
        predictions[s] = value
        buffers["indoor_temp"][n + s] = value

    interval = 1440 // steps
    midnight = datetime.combine(target_date, time_of_day.min)
    timestamps = tuple(midnight + timedelta(minutes=interval * s) for s in range(steps))

    observed_arr = None
    if observed is not None:
        observed_arr = np.asarray(observed, dtype=float)
        if observed_arr.shape != (steps,):
            raise PredictionError("observed series must cover the forecast day")

    return ForecastResult(
        date=target_date,
        cluster_id=cluster_id,
        timestamps=timestamps,
        predicted=predictions,
        observed=observed_arr,
    )


def one_step_predictions(library: ScenarioLibrary, windows, history=None):
    """One-step-ahead predictions over ``windows`` from observed lags.

    Each day is scored with the model of its own scenario; steps whose lag
    budget reaches before the first supplied window are skipped.  Returns
    ``(timestamps, observed, predicted)``.
    """
    history = sorted(history or [], key=lambda w: w.date)
    windows = sorted(windows, key=lambda w: w.date)
    if not windows:
        raise ValueError("no windows to evaluate")
    block = history + windows
    for a, b in zip(block, block[1:]):
        if (b.date - a.date) != timedelta(days=1):
            raise ValueError(f"windows not contiguous between {a.date} and {b.date}")

    channels = _stacked_channels(block)
    n = library.lag_budget
    offset = sum(len(w) for w in history)

    timestamps = []
    observed = []
    predicted = []
    position = offset
    for window in windows:
        cluster_id = assign_online_day(library, window)
        expr = library.model_for(cluster_id).expression
        validate_expression(expr, n)
        for s, record in enumerate(window.records):
            t = position + s
            if t < n:
                continue
            timestamps.append(record.timestamp)
            observed.append(channels["indoor_temp"][t])
            predicted.append(evaluate_expression(expr, LagSnapshot(channels, t)))
        position += len(window)

    return timestamps, np.asarray(observed), np.asarray(predicted)


def evaluate_on_test(library: ScenarioLibrary, test_windows, history=None) -> MetricReport:
    """Score one-step-ahead accuracy over held-out windows."""
    _, observed, predicted = one_step_predictions(library, test_windows, history)
    if observed.size == 0:
        raise ValueError(
            "no evaluable steps: supply history so the first test day has lags"
        )
    return compute_metrics(observed, predicted)


# ---------------------------------------------------------------------------
# Persistence


def library_to_dict(library: ScenarioLibrary) -> dict:
    return {
        "format": LIBRARY_FORMAT,
        "mode": library.mode,
        "lag_budget": library.lag_budget,
        "spectral": {
            "harmonics": library.spectral.harmonics,
            "channels": list(library.spectral.channels),
        },
        "normalization": {
            "names": list(library.norm_params.names),
            "mean": library.norm_params.mean.tolist(),
            "std": library.norm_params.std.tolist(),
        },
        "cluster": {
            "k": library.cluster_model.k,
            "seed": library.cluster_model.seed,
            "inertia": library.cluster_model.inertia,
            "centroids": library.cluster_model.centroids.tolist(),
            "assignments": library.cluster_model.assignments.tolist(),
        },
        "models": [
            {
                "cluster_id": m.cluster_id,
                "expression": format_expression(m.expression),
                "training_mse": None if np.isnan(m.training_mse) else m.training_mse,
                "trained_on": [d.isoformat() for d in m.trained_on],
                "untrainable": m.untrainable,
            }
            for m in library.models
        ],
    }


def library_from_dict(payload: dict) -> ScenarioLibrary:
    if payload.get("format") != LIBRARY_FORMAT:
        raise ValueError(f"unsupported library format {payload.get('format')!r}")
    spectral = SpectralConfig(
        harmonics=payload["spectral"]["harmonics"],
        channels=tuple(payload["spectral"]["channels"]),
    )
    params = NormParams(
        mean=np.asarray(payload["normalization"]["mean"], dtype=float),
        std=np.asarray(payload["normalization"]["std"], dtype=float),
        names=tuple(payload["normalization"]["names"]),
    )
    cluster = payload["cluster"]
    cluster_model = ClusterModel(
        k=int(cluster["k"]),
        centroids=np.asarray(cluster["centroids"], dtype=float),
        assignments=np.asarray(cluster["assignments"], dtype=int),
        inertia=float(cluster["inertia"]),
        seed=int(cluster["seed"]),
    )
    lag_budget = int(payload["lag_budget"])
    models = []
    for entry in sorted(payload["models"], key=lambda e: e["cluster_id"]):
        expr = parse_expression(entry["expression"])
        validate_expression(expr, lag_budget)
        models.append(ScenarioModel(
            cluster_id=int(entry["cluster_id"]),
            expression=expr,
            training_mse=float("nan") if entry["training_mse"] is None else float(entry["training_mse"]),
            trained_on=tuple(date.fromisoformat(d) for d in entry["trained_on"]),
            untrainable=bool(entry.get("untrainable", False)),
        ))
    if [m.cluster_id for m in models] != list(range(cluster_model.k)):
        raise ValueError("library must hold exactly one model per cluster index")
    return ScenarioLibrary(
        mode=payload["mode"],
        cluster_model=cluster_model,
        norm_params=params,
        spectral=spectral,
        lag_budget=lag_budget,
        models=tuple(models),
    )


def save_library(library: ScenarioLibrary, path) -> None:
    path = Path(path)
    path.write_text(json.dumps(library_to_dict(library), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def load_library(path) -> ScenarioLibrary:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return library_from_dict(payload)


def write_forecast_csv(result: ForecastResult, path) -> None:
    """Fig-style trace: timestamp, observed, predicted, absolute error."""
    import csv

    path = Path(path)
    errors = result.abs_error
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["timestamp", "observed", "predicted", "abs_error"])
        for i, ts in enumerate(result.timestamps):
            observed = "" if result.observed is None else repr(float(result.observed[i]))
            error = "" if errors is None else repr(float(errors[i]))
            writer.writerow([ts.isoformat(), observed, repr(float(result.predicted[i])), error])
