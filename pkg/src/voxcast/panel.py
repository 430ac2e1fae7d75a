"""Multilevel demand panels: ingest, cleaning, normalization, splits, synthesis.

A panel is a row-oriented table keyed by (item, base, equipment, year) with k
explanatory feature columns and one annual-demand target column.  The target
is populated on the records of the last panel year and holds the demand of
the *following* year at that (base, equipment) cell, so feature years never
overlap the forecast year.  Panels are immutable after construction; every
operation returns a new panel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateKey,
    IncompleteGrid,
    MissingLevelColumn,
    NegativeValue,
    NonNumericCell,
    TooFewItems,
    UnimputableFeature,
)

KEY_COLUMNS = ("item", "base", "equipment", "year")
LEVEL_AXES = ("base", "equipment", "year")


@dataclass(frozen=True)
class FeatureSchema:
    """Column layout of a demand panel.

    ``level_flags`` maps each feature to three booleans saying whether it
    genuinely varies along (base, equipment, year); features flat along an
    axis are simply stored replicated along it.
    """

    feature_ids: tuple[str, ...]
    target_id: str
    level_axes: tuple[str, str, str] = LEVEL_AXES
    level_flags: Mapping[str, tuple[bool, bool, bool]] = field(default_factory=dict)
    history_id: str | None = None

    def __post_init__(self):
        if len(self.level_axes) != 3:
            raise ValueError("exactly three level axes required")
        if len(self.feature_ids) < 1:
            raise ValueError("at least one feature required")
        if len(set(self.feature_ids)) != len(self.feature_ids):
            raise ValueError("feature ids must be unique")
        if self.target_id in self.feature_ids:
            raise ValueError("target id collides with a feature id")
        if self.history_id is not None and self.history_id not in self.feature_ids:
            raise ValueError(f"history feature {self.history_id!r} not in schema")

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    @property
    def width(self) -> int:
        """Key columns plus feature columns (target excluded)."""
        return len(KEY_COLUMNS) + self.n_features


@dataclass(frozen=True)
class FoldSplit:
    """Item-level train/validation/test partition for one fold."""

    fold: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def all_items(self) -> tuple[str, ...]:
        return self.train + self.val + self.test


@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature population mean/std fitted on training items."""

    feature_ids: tuple[str, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "features": list(self.feature_ids),
            "means": list(self.means),
            "stds": list(self.stds),
        }


class DemandPanel:
    """Immutable multilevel demand panel backed by a pandas frame."""

    def __init__(self, schema: FeatureSchema, frame: pd.DataFrame, validate: bool = True):
        self.schema = schema
        frame = frame.reset_index(drop=True)
        self._frame = frame
        if validate:
            self._validate()

    def _validate(self) -> None:
        f = self._frame
        for col in KEY_COLUMNS:
            if col not in f.columns:
                raise MissingLevelColumn(f"missing key column {col!r}")
        dup = f.duplicated(subset=list(KEY_COLUMNS))
        if dup.any():
            row = f.loc[dup.idxmax(), list(KEY_COLUMNS)].tolist()
            raise DuplicateKey(f"duplicate key {tuple(row)}")
        target = f[self.schema.target_id]
        if (target.dropna() < 0).any():
            raise NegativeValue("target demand must be nonnegative where present")

    # -- accessors -----------------------------------------------------

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame.copy()

    @property
    def n_records(self) -> int:
        return len(self._frame)

    @cached_property
    def items(self) -> tuple[str, ...]:
        return tuple(sorted(self._frame["item"].unique()))

    @cached_property
    def bases(self) -> tuple[str, ...]:
        return tuple(sorted(self._frame["base"].unique()))

    @cached_property
    def equipment(self) -> tuple[str, ...]:
        return tuple(sorted(self._frame["equipment"].unique()))

    @cached_property
    def years(self) -> tuple[int, ...]:
        return tuple(sorted(int(y) for y in self._frame["year"].unique()))

    @property
    def missing_mask(self) -> pd.DataFrame:
        return self._frame[list(self.schema.feature_ids)].isna()

    def with_frame(self, frame: pd.DataFrame, validate: bool = False) -> "DemandPanel":
        return DemandPanel(self.schema, frame, validate=validate)

    def subset(self, items: Sequence[str]) -> "DemandPanel":
        keep = self._frame["item"].isin(set(items))
        return DemandPanel(self.schema, self._frame.loc[keep], validate=False)

    # -- dense grid view -------------------------------------------------

    @cached_property
    def _dense(self) -> np.ndarray:
        """(n_items, n_years, n_features, n_bases, n_equipment) float array.

        Missing rows or unimputed cells appear as NaN.
        """
        f = self._frame
        full = pd.MultiIndex.from_product(
            [self.items, self.bases, self.equipment, self.years],
            names=list(KEY_COLUMNS),
        )
        block = (
            f.set_index(list(KEY_COLUMNS))[list(self.schema.feature_ids)]
            .reindex(full)
            .to_numpy(dtype=np.float64)
        )
        shape = (
            len(self.items),
            len(self.bases),
            len(self.equipment),
            len(self.years),
            self.schema.n_features,
        )
        return block.reshape(shape).transpose(0, 3, 4, 1, 2)

    @property
    def dense_values(self) -> np.ndarray:
        """Read-only (items, years, features, bases, equipment) block; NaN = missing."""
        return self._dense

    def item_grid(self, item: str) -> np.ndarray:
        """Dense (years, features, bases, equipment) block for one item."""
        try:
            idx = self.items.index(item)
        except ValueError:
            raise IncompleteGrid(f"unknown item {item!r}") from None
        grid = self._dense[idx]
        if np.isnan(grid).any():
            raise IncompleteGrid(f"item {item!r} has missing (base, equipment, year) cells")
        return grid.copy()

    def grids(self, items: Sequence[str]) -> np.ndarray:
        """Stacked item grids, shape (len(items), years, features, bases, equipment)."""
        return np.stack([self.item_grid(it) for it in items])

    # -- targets and history ---------------------------------------------

    @cached_property
    def target_year(self) -> int:
        f = self._frame
        with_target = f.loc[f[self.schema.target_id].notna(), "year"]
        if with_target.empty:
            raise ValueError("panel has no target values")
        return int(with_target.max())

    def item_actuals(self, items: Sequence[str] | None = None) -> dict[str, float]:
        """Next-year annual demand per item: target summed over (base, equipment)."""
        f = self._frame
        rows = f[f["year"] == self.target_year]
        sums = rows.groupby("item")[self.schema.target_id].sum(min_count=1)
        wanted = self.items if items is None else tuple(items)
        out = {}
        for it in wanted:
            val = sums.get(it, np.nan)
            if pd.isna(val):
                raise ValueError(f"item {it!r} has no target in year {self.target_year}")
            out[it] = float(val)
        return out

    def history_series(self, item: str) -> np.ndarray:
        """Annual demand history (ascending years) from the history feature."""
        if self.schema.history_id is None:
            raise ValueError("panel schema declares no demand-history feature")
        f = self._frame
        rows = f[f["item"] == item]
        series = rows.groupby("year")[self.schema.history_id].sum(min_count=1)
        series = series.reindex(list(self.years))
        return series.to_numpy(dtype=np.float64)


# ---------------------------------------------------------------------------
# ingest / export
# ---------------------------------------------------------------------------

def ingest_panel(source, history_feature: str | None = None) -> DemandPanel:
    """Parse a delimited table into a validated panel.

    Layout: a header row with the four key columns plus feature columns, the
    last column being the annual-demand target.  Empty cells become missing
    marks; the target may be empty on non-target years.
    """
    raw = pd.read_csv(source, dtype=str, keep_default_na=False)
    raw.columns = [c.strip() for c in raw.columns]
    missing = [c for c in KEY_COLUMNS if c not in raw.columns]
    if missing:
        raise MissingLevelColumn(f"missing key column(s): {', '.join(missing)}")
    value_cols = [c for c in raw.columns if c not in KEY_COLUMNS]
    if len(value_cols) < 2:
        raise ValueError("need at least one feature column and a target column")
    target_id = value_cols[-1]
    feature_ids = tuple(value_cols[:-1])

    frame = pd.DataFrame()
    for col in ("item", "base", "equipment"):
        frame[col] = raw[col].str.strip()
    frame["year"] = _parse_numeric(raw["year"], "year", allow_empty=False).astype(np.int64)
    for col in value_cols:
        frame[col] = _parse_numeric(raw[col], col, allow_empty=True)

    if history_feature is not None and history_feature not in feature_ids:
        raise ValueError(f"history feature {history_feature!r} not among features")
    schema = FeatureSchema(
        feature_ids=feature_ids,
        target_id=target_id,
        level_flags=_infer_level_flags(frame, feature_ids),
        history_id=history_feature,
    )
    return DemandPanel(schema, frame)


def _parse_numeric(col: pd.Series, name: str, allow_empty: bool) -> pd.Series:
    stripped = col.str.strip()
    empty = stripped == ""
    if empty.any() and not allow_empty:
        raise NonNumericCell(f"empty cell in required column {name!r}")
    parsed = pd.to_numeric(stripped.where(~empty), errors="coerce")
    bad = parsed.isna() & ~empty
    if bad.any():
        value = stripped[bad].iloc[0]
        raise NonNumericCell(f"non-numeric cell {value!r} in column {name!r}")
    return parsed.astype(np.float64)


def _infer_level_flags(frame: pd.DataFrame, feature_ids: Sequence[str]) -> dict:
    flags = {}
    groupers = {
        "base": ["item", "equipment", "year"],
        "equipment": ["item", "base", "year"],
        "year": ["item", "base", "equipment"],
    }
    for f in feature_ids:
        per_axis = []
        for axis in LEVEL_AXES:
            nun = frame.groupby(groupers[axis], sort=False)[f].nunique(dropna=True)
            per_axis.append(bool((nun > 1).any()))
        flags[f] = tuple(per_axis)
    return flags


def write_panel_csv(panel: DemandPanel, path) -> None:
    """Write a panel in the ingest layout (keys, features, target last)."""
    cols = list(KEY_COLUMNS) + list(panel.schema.feature_ids) + [panel.schema.target_id]
    panel.frame[cols].to_csv(path, index=False, float_format="%.17g")


# ---------------------------------------------------------------------------
# cleaning
# ---------------------------------------------------------------------------

def remove_outliers(panel: DemandPanel) -> DemandPanel:
    """Mark feature values outside the box-plot outer fence as missing.

    Fence: [Q1 - 3*IQR, Q3 + 3*IQR] per feature, quartiles by linear
    interpolation.  Zero IQR keeps the whole column.
    """
    frame = panel.frame
    for f in panel.schema.feature_ids:
        col = frame[f].to_numpy(dtype=np.float64)
        finite = col[~np.isnan(col)]
        if finite.size == 0:
            continue
        q1, q3 = np.percentile(finite, [25.0, 75.0])
        iqr = q3 - q1
        if iqr == 0:
            continue
        lo, hi = q1 - 3.0 * iqr, q3 + 3.0 * iqr
        with np.errstate(invalid="ignore"):
            out = (col < lo) | (col > hi)
        if out.any():
            col = col.copy()
            col[out] = np.nan
            frame[f] = col
    return panel.with_frame(frame)


def impute_missing(panel: DemandPanel) -> DemandPanel:
    """Fill missing feature cells by item median, then global median."""
    frame = panel.frame
    for f in panel.schema.feature_ids:
        col = frame[f]
        if not col.isna().any():
            continue
        if col.isna().all():
            raise UnimputableFeature(f"feature {f!r} is missing everywhere")
        item_med = frame.groupby("item")[f].transform("median")
        global_med = float(col.median())
        frame[f] = col.fillna(item_med).fillna(global_med)
    return panel.with_frame(frame)


def normalize(
    panel: DemandPanel,
    train_items: Sequence[str] | None = None,
) -> tuple[DemandPanel, NormalizationStats]:
    """Z-score every feature with population stats from training items only.

    The target column is left unscaled.  Constant features (zero std on the
    fitting scope) map to all zeros.
    """
    frame = panel.frame
    feats = list(panel.schema.feature_ids)
    if frame[feats].isna().any().any():
        raise ValueError("normalize requires an imputed panel (no missing features)")
    if train_items is None:
        scope = frame
    else:
        scope = frame[frame["item"].isin(set(train_items))]
        if scope.empty:
            raise ValueError("no records for the given training items")
    means, stds = [], []
    for f in feats:
        m = float(scope[f].mean())
        s = float(scope[f].std(ddof=0))
        means.append(m)
        stds.append(s)
        if s == 0.0:
            frame[f] = 0.0
        else:
            frame[f] = (frame[f] - m) / s
    stats = NormalizationStats(tuple(feats), tuple(means), tuple(stds))
    return panel.with_frame(frame), stats


def apply_normalization(panel: DemandPanel, stats: NormalizationStats) -> DemandPanel:
    """Apply previously fitted normalization stats to another panel."""
    if stats.feature_ids != panel.schema.feature_ids:
        raise ValueError("stats were fitted on a different feature set")
    frame = panel.frame
    for f, m, s in zip(stats.feature_ids, stats.means, stats.stds):
        frame[f] = 0.0 if s == 0.0 else (frame[f] - m) / s
    return panel.with_frame(frame)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------

def make_folds(panel: DemandPanel, seed: int, n_folds: int = 5) -> list[FoldSplit]:
    """Item-level rotation split: each item lands in test exactly once."""
    items = list(panel.items)
    if len(items) < n_folds:
        raise TooFewItems(f"need at least {n_folds} items, got {len(items)}")
    rng = np.random.default_rng(seed)
    order = [items[i] for i in rng.permutation(len(items))]
    sizes = [len(items) // n_folds + (1 if i < len(items) % n_folds else 0) for i in range(n_folds)]
    chunks, pos = [], 0
    for s in sizes:
        chunks.append(tuple(order[pos : pos + s]))
        pos += s
    folds = []
    for i in range(n_folds):
        test = chunks[i]
        val = chunks[(i + 1) % n_folds]
        train = tuple(it for j, c in enumerate(chunks) if j not in (i, (i + 1) % n_folds) for it in c)
        folds.append(FoldSplit(fold=i, train=train, val=val, test=test))
    return folds


# ---------------------------------------------------------------------------
# synthetic panels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a planted-structure synthetic panel.

    Demand at a (item, base, equipment, year) cell is zero with probability
    ``zero_inflation``, otherwise Poisson with a rate shared through planted
    per-axis clusters; items carry an individual scale and yearly trend.
    Explanatory features are noisy affine readouts of the same rate, so the
    demand process is recoverable from the features.
    """

    items: int
    bases: int
    equipment: int
    years: int
    features: int
    feature_clusters: int = 3
    base_clusters: int = 2
    equipment_clusters: int = 2
    zero_inflation: float = 0.3
    noise_scale: float = 0.05
    seed: int = 0
    start_year: int = 2010

    def __post_init__(self):
        for name in ("items", "bases", "equipment", "years", "features"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.zero_inflation <= 1.0:
            raise ValueError("zero_inflation must be in [0, 1]")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")


def _planted_assignment(rng: np.random.Generator, n_members: int, n_clusters: int) -> np.ndarray:
    """Balanced random assignment with every cluster non-empty when possible."""
    c = min(n_clusters, n_members)
    labels = np.array([i % c for i in range(n_members)])
    return labels[rng.permutation(n_members)]


def generate_synthetic(spec: SyntheticSpec) -> tuple[DemandPanel, dict]:
    """Build a synthetic panel plus the ground-truth record that generated it."""
    rng = np.random.default_rng(spec.seed)
    n_i, n_b, n_e, n_y, n_f = spec.items, spec.bases, spec.equipment, spec.years, spec.features

    item_ids = [f"I{i:04d}" for i in range(n_i)]
    base_ids = [f"B{i:02d}" for i in range(n_b)]
    equip_ids = [f"E{i:02d}" for i in range(n_e)]
    years = list(range(spec.start_year, spec.start_year + n_y))

    feature_ids = []
    for i in range(n_f):
        if i == 0:
            feature_ids.append("demand")
        elif i == 1:
            feature_ids.append("unit_cost")
        else:
            feature_ids.append(f"f{i + 1:02d}")

    base_assign = _planted_assignment(rng, n_b, spec.base_clusters)
    equip_assign = _planted_assignment(rng, n_e, spec.equipment_clusters)
    generic = [i for i in range(n_f) if feature_ids[i] not in ("demand", "unit_cost")]
    feat_assign = np.full(n_f, -1, dtype=int)
    if generic:
        feat_assign[generic] = _planted_assignment(rng, len(generic), spec.feature_clusters)
    n_fc = int(feat_assign.max()) + 1 if generic else 0

    # demand process
    lam = rng.lognormal(mean=math.log(4.0), sigma=0.9, size=n_i)
    trend = rng.uniform(-0.05, 0.25, size=n_i)
    base_cluster_mult = rng.uniform(0.5, 1.5, size=max(spec.base_clusters, 1))
    equip_cluster_mult = rng.uniform(0.5, 1.5, size=max(spec.equipment_clusters, 1))
    m_b = base_cluster_mult[base_assign] * (1.0 + 0.05 * rng.normal(size=n_b))
    m_e = equip_cluster_mult[equip_assign] * (1.0 + 0.05 * rng.normal(size=n_e))
    m_b = np.clip(m_b, 0.1, None)
    m_e = np.clip(m_e, 0.1, None)

    # rate over the feature window plus the target year (index n_y)
    ygrid = np.arange(n_y + 1)
    growth = (1.0 + trend)[:, None] ** ygrid[None, :]              # (I, Y+1)
    rate = (
        lam[:, None, None, None]
        * m_b[None, :, None, None]
        * m_e[None, None, :, None]
        * growth[:, None, None, :]
    )                                                               # (I, B, E, Y+1)
    zeros = rng.random(rate.shape) < spec.zero_inflation
    demand = rng.poisson(rate)
    demand[zeros] = 0
    if spec.zero_inflation >= 1.0:
        demand[:] = 0

    # cluster-level feature coefficients
    coef = {
        "base_pattern": rng.uniform(0.5, 1.5, size=(max(n_fc, 1), max(spec.base_clusters, 1))),
        "equip_pattern": rng.uniform(0.5, 1.5, size=(max(n_fc, 1), max(spec.equipment_clusters, 1))),
        "offset": rng.uniform(0.5, 2.0, size=max(n_fc, 1)),
        "rate_gain": rng.uniform(0.1, 0.5, size=max(n_fc, 1)),
    }
    feat_scale = rng.uniform(0.8, 1.25, size=n_f)
    unit_cost = rng.lognormal(mean=math.log(50.0), sigma=1.2, size=n_i)

    window_rate = rate[:, :, :, :n_y]                              # (I, B, E, Y)
    values = np.empty((n_f, n_i, n_b, n_e, n_y), dtype=np.float64)
    for fi, fname in enumerate(feature_ids):
        if fname == "demand":
            values[fi] = demand[:, :, :, :n_y]
        elif fname == "unit_cost":
            values[fi] = np.broadcast_to(
                unit_cost[:, None, None, None], (n_i, n_b, n_e, n_y)
            )
        else:
            q = feat_assign[fi]
            pattern = (
                coef["base_pattern"][q][base_assign][None, :, None, None]
                * coef["equip_pattern"][q][equip_assign][None, None, :, None]
            )
            signal = coef["offset"][q] + coef["rate_gain"][q] * window_rate
            noise = spec.noise_scale * rng.normal(size=(n_i, n_b, n_e, n_y))
            values[fi] = feat_scale[fi] * pattern * signal + noise

    # assemble the long frame; target attaches to the last window year
    mi = pd.MultiIndex.from_product(
        [item_ids, base_ids, equip_ids, years], names=list(KEY_COLUMNS)
    )
    frame = pd.DataFrame(index=mi).reset_index()
    flat = values.reshape(n_f, -1).T                               # rows follow the product order
    for fi, fname in enumerate(feature_ids):
        frame[fname] = flat[:, fi]
    target = np.full(len(frame), np.nan)
    last_year_mask = frame["year"].to_numpy() == years[-1]
    target[last_year_mask] = demand[:, :, :, n_y].reshape(-1)
    frame["target_demand"] = target

    schema = FeatureSchema(
        feature_ids=tuple(feature_ids),
        target_id="target_demand",
        level_flags=_infer_level_flags(frame, feature_ids),
        history_id="demand",
    )
    truth = {
        "spec": {
            "items": n_i, "bases": n_b, "equipment": n_e, "years": n_y,
            "features": n_f, "feature_clusters": spec.feature_clusters,
            "base_clusters": spec.base_clusters,
            "equipment_clusters": spec.equipment_clusters,
            "zero_inflation": spec.zero_inflation,
            "noise_scale": spec.noise_scale, "seed": spec.seed,
            "start_year": spec.start_year,
        },
        "assignments": {
            "feature": {feature_ids[i]: int(feat_assign[i]) for i in range(n_f)},
            "base": {base_ids[i]: int(base_assign[i]) for i in range(n_b)},
            "equipment": {equip_ids[i]: int(equip_assign[i]) for i in range(n_e)},
        },
        "items": {
            item_ids[i]: {"scale": float(lam[i]), "trend": float(trend[i]),
                          "unit_cost": float(unit_cost[i])}
            for i in range(n_i)
        },
        "multipliers": {
            "base": {base_ids[i]: float(m_b[i]) for i in range(n_b)},
            "equipment": {equip_ids[i]: float(m_e[i]) for i in range(n_e)},
        },
        "coefficients": {k: v.tolist() for k, v in coef.items()},
        "target_year": years[-1] + 1,
    }
    return DemandPanel(schema, frame), truth


def write_ground_truth(truth: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
