"""Forecast accuracy metrics and the cross-fold comparison report.

Three metrics: RMSE, MAE, and min-max accuracy (mean over samples of
min(actual, forecast) / max(actual, forecast), defined as 1 when both are
zero).  Results from external predictors can be imported from a delimited
file with columns (model, fold, item, actual, forecast, runtime_seconds).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import EmptyInput, LengthMismatch, NegativeValue


def _check_pair(actual, forecast) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=np.float64).ravel()
    f = np.asarray(forecast, dtype=np.float64).ravel()
    if a.size != f.size:
        raise LengthMismatch(f"length {a.size} vs {f.size}")
    if a.size == 0:
        raise EmptyInput("metric called on empty vectors")
    return a, f


def rmse(actual, forecast) -> float:
    a, f = _check_pair(actual, forecast)
    return float(np.sqrt(np.mean((f - a) ** 2)))


def mae(actual, forecast) -> float:
    a, f = _check_pair(actual, forecast)
    return float(np.mean(np.abs(f - a)))


def minmax_accuracy(actual, forecast) -> float:
    """Mean of min/max ratios, in [0, 1]; a (0, 0) pair counts as exact."""
    a, f = _check_pair(actual, forecast)
    if (a < 0).any() or (f < 0).any():
        raise NegativeValue("min-max accuracy requires nonnegative values")
    lo = np.minimum(a, f)
    hi = np.maximum(a, f)
    ratios = np.ones_like(a)
    nz = hi > 0
    ratios[nz] = lo[nz] / hi[nz]
    return float(np.mean(ratios))


@dataclass(frozen=True)
class ForecastResult:
    """One model's predictions for one fold's test items."""

    model_id: str
    fold: int
    items: tuple[str, ...]
    actual: tuple[float, ...]
    forecast: tuple[float, ...]
    runtime_seconds: float

    def __post_init__(self):
        if not (len(self.items) == len(self.actual) == len(self.forecast)):
            raise LengthMismatch("items, actual, and forecast must align")
        if len(self.actual) == 0:
            raise EmptyInput("empty forecast result")
        if any(a < 0 for a in self.actual):
            raise NegativeValue("actual demand must be nonnegative")

    def metric(self, name: str) -> float:
        fn = {"minmax": minmax_accuracy, "rmse": rmse, "mae": mae}[name]
        return fn(self.actual, self.forecast)


@dataclass(frozen=True)
class ModelSummary:
    model_id: str
    n_folds: int
    minmax_mean: float
    minmax_std: float
    rmse_mean: float
    rmse_std: float
    mae_mean: float
    mae_std: float
    runtime_mean: float


@dataclass(frozen=True)
class MetricReport:
    """Per-model mean/std across folds, best model by mean min-max accuracy."""

    models: tuple[ModelSummary, ...]
    best_model: str

    def to_frame(self, include_runtime: bool = True) -> pd.DataFrame:
        cols = [
            "model", "n_folds", "minmax_mean", "minmax_std",
            "rmse_mean", "rmse_std", "mae_mean", "mae_std",
        ]
        rows = []
        for m in self.models:
            row = [m.model_id, m.n_folds, m.minmax_mean, m.minmax_std,
                   m.rmse_mean, m.rmse_std, m.mae_mean, m.mae_std]
            if include_runtime:
                row.append(m.runtime_mean)
            rows.append(row)
        if include_runtime:
            cols.append("runtime_mean")
        return pd.DataFrame(rows, columns=cols)


def compare_models(results: Sequence[ForecastResult]) -> MetricReport:
    """Aggregate fold results per model; std is population std over folds."""
    if not results:
        raise EmptyInput("no results to compare")
    order: list[str] = []
    grouped: dict[str, list[ForecastResult]] = {}
    for r in results:
        if r.model_id not in grouped:
            grouped[r.model_id] = []
            order.append(r.model_id)
        grouped[r.model_id].append(r)

    summaries = []
    for model_id in order:
        rs = sorted(grouped[model_id], key=lambda r: r.fold)
        per_metric = {}
        for name in ("minmax", "rmse", "mae"):
            vals = np.array([r.metric(name) for r in rs])
            per_metric[name] = (float(vals.mean()), float(vals.std(ddof=0)))
        runtime = float(np.mean([r.runtime_seconds for r in rs]))
        summaries.append(ModelSummary(
            model_id=model_id,
            n_folds=len(rs),
            minmax_mean=per_metric["minmax"][0], minmax_std=per_metric["minmax"][1],
            rmse_mean=per_metric["rmse"][0], rmse_std=per_metric["rmse"][1],
            mae_mean=per_metric["mae"][0], mae_std=per_metric["mae"][1],
            runtime_mean=runtime,
        ))
    best_idx = int(np.argmax([s.minmax_mean for s in summaries]))
    return MetricReport(models=tuple(summaries), best_model=summaries[best_idx].model_id)


# ---------------------------------------------------------------------------
# external result exchange
# ---------------------------------------------------------------------------

RESULT_COLUMNS = ("model", "fold", "item", "actual", "forecast", "runtime_seconds")


def write_results_csv(results: Sequence[ForecastResult], path) -> None:
    rows = []
    for r in results:
        for it, a, f in zip(r.items, r.actual, r.forecast):
            rows.append((r.model_id, r.fold, it, a, f, r.runtime_seconds))
    pd.DataFrame(rows, columns=list(RESULT_COLUMNS)).to_csv(
        path, index=False, float_format="%.17g"
    )


def read_results_csv(path) -> list[ForecastResult]:
    frame = pd.read_csv(path, dtype={"model": str, "item": str}, comment="#")
    missing = [c for c in RESULT_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"result file lacks columns: {', '.join(missing)}")
    out = []
    for (model, fold), grp in frame.groupby(["model", "fold"], sort=False):
        out.append(ForecastResult(
            model_id=str(model),
            fold=int(fold),
            items=tuple(grp["item"]),
            actual=tuple(float(x) for x in grp["actual"]),
            forecast=tuple(float(x) for x in grp["forecast"]),
            runtime_seconds=float(grp["runtime_seconds"].iloc[0]),
        ))
    return out
