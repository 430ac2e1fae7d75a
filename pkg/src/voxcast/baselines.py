"""Reference forecasters run against the same folds as the voxel model.

Time-series baselines read the annual demand history declared in the panel
schema; the regression baselines train on the flattened feature grid of each
item.  Further models can be brought in through the external result file
format instead of being reimplemented here.
"""

from __future__ import annotations

import time
from enum import Enum

import numpy as np
from sklearn.linear_model import LinearRegression
from sklearn.tree import DecisionTreeRegressor

from .errors import InsufficientHistory
from .metrics import ForecastResult, rmse
from .panel import DemandPanel, FoldSplit

WMA_WEIGHTS = (0.5, 0.3, 0.2)  # most-recent-first
SES_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
TREE_MAX_DEPTH = 6


class BaselineKind(Enum):
    ARITHMETIC_MEAN = "arithmetic_mean"
    SIMPLE_EXPONENTIAL_SMOOTHING = "simple_exponential_smoothing"
    WEIGHTED_MOVING_AVERAGE = "weighted_moving_average"
    LINEAR_REGRESSION = "linear_regression"
    DECISION_TREE = "decision_tree"


SHORT_IDS = {
    BaselineKind.ARITHMETIC_MEAN: "am",
    BaselineKind.SIMPLE_EXPONENTIAL_SMOOTHING: "ses",
    BaselineKind.WEIGHTED_MOVING_AVERAGE: "wma",
    BaselineKind.LINEAR_REGRESSION: "lr",
    BaselineKind.DECISION_TREE: "dt",
}


def ses_forecast(history: np.ndarray, alpha: float) -> float:
    """Exponentially smoothed level; alpha = 1 reproduces the last observation."""
    level = float(history[0])
    for x in history[1:]:
        level = alpha * float(x) + (1.0 - alpha) * level
    return level


def wma_forecast(history: np.ndarray, weights=WMA_WEIGHTS) -> float:
    """Weighted average of the most recent observations, newest first.

    Shorter histories use the leading weights renormalized.
    """
    recent = history[::-1][: len(weights)]
    w = np.asarray(weights[: len(recent)], dtype=np.float64)
    w = w / w.sum()
    return float(np.dot(w, recent))


def _histories(panel: DemandPanel, items) -> dict[str, np.ndarray]:
    if panel.schema.history_id is None:
        raise InsufficientHistory("panel declares no demand-history feature")
    out = {}
    for it in items:
        series = panel.history_series(it)
        series = series[~np.isnan(series)]
        if series.size < 1:
            raise InsufficientHistory(f"item {it!r} has no demand history")
        out[it] = series
    return out


def _flat_features(panel: DemandPanel, items) -> np.ndarray:
    return panel.grids(items).reshape(len(items), -1)


def run_baseline(
    kind: BaselineKind,
    panel: DemandPanel,
    fold: FoldSplit,
    seed: int = 0,
) -> ForecastResult:
    """Fit one baseline on the fold and forecast its test items."""
    kind = BaselineKind(kind)
    start = time.perf_counter()
    actuals = panel.item_actuals(fold.test)
    test_items = tuple(fold.test)

    if kind is BaselineKind.ARITHMETIC_MEAN:
        hist = _histories(panel, test_items)
        forecasts = [float(np.mean(hist[it])) for it in test_items]

    elif kind is BaselineKind.WEIGHTED_MOVING_AVERAGE:
        hist = _histories(panel, test_items)
        forecasts = [wma_forecast(hist[it]) for it in test_items]

    elif kind is BaselineKind.SIMPLE_EXPONENTIAL_SMOOTHING:
        val_hist = _histories(panel, fold.val)
        val_actual = panel.item_actuals(fold.val)
        best_alpha, best_err = SES_GRID[0], np.inf
        for alpha in SES_GRID:
            preds = [ses_forecast(val_hist[it], alpha) for it in fold.val]
            err = rmse([val_actual[it] for it in fold.val], preds)
            if err < best_err:
                best_alpha, best_err = alpha, err
        hist = _histories(panel, test_items)
        forecasts = [ses_forecast(hist[it], best_alpha) for it in test_items]

    elif kind in (BaselineKind.LINEAR_REGRESSION, BaselineKind.DECISION_TREE):
        fit_items = tuple(fold.train) + tuple(fold.val)
        X = _flat_features(panel, fit_items)
        y = np.array([panel.item_actuals(fit_items)[it] for it in fit_items])
        if kind is BaselineKind.LINEAR_REGRESSION:
            model = LinearRegression()
        else:
            model = DecisionTreeRegressor(max_depth=TREE_MAX_DEPTH, random_state=seed)
        model.fit(X, y)
        preds = model.predict(_flat_features(panel, test_items))
        forecasts = [float(max(p, 0.0)) for p in preds]

    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown baseline {kind}")

    runtime = time.perf_counter() - start
    return ForecastResult(
        model_id=SHORT_IDS[kind],
        fold=fold.fold,
        items=test_items,
        actual=tuple(actuals[it] for it in test_items),
        forecast=tuple(float(f) for f in forecasts),
        runtime_seconds=runtime,
    )
