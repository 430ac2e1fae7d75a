import numpy as np
import pandas as pd
import pytest

from voxcast.panel import (
    DemandPanel,
    FeatureSchema,
    FoldSplit,
    SyntheticSpec,
    generate_synthetic,
    make_folds,
)


def panel_from_records(records, feature_ids, history_id=None, target_id="target"):
    """Build a panel straight from (item, base, equipment, year, feats..., target) dicts."""
    frame = pd.DataFrame(records)
    for col in ("item", "base", "equipment"):
        frame[col] = frame[col].astype(str)
    frame["year"] = frame["year"].astype(np.int64)
    schema = FeatureSchema(
        feature_ids=tuple(feature_ids),
        target_id=target_id,
        history_id=history_id,
    )
    return DemandPanel(schema, frame)


def single_axis_panel(values_by_item_year, feature_ids, history_id=None):
    """1 base x 1 equipment panel: values_by_item_year[(item, year)] = (feats..., target)."""
    records = []
    for (item, year), payload in values_by_item_year.items():
        feats, target = payload[:-1], payload[-1]
        rec = {"item": item, "base": "B0", "equipment": "E0", "year": year,
               "target": target}
        rec.update(dict(zip(feature_ids, feats)))
        records.append(rec)
    return panel_from_records(records, feature_ids, history_id=history_id)


@pytest.fixture(scope="session")
def small_panel():
    spec = SyntheticSpec(items=12, bases=3, equipment=2, years=4, features=5, seed=7)
    panel, truth = generate_synthetic(spec)
    return panel


@pytest.fixture(scope="session")
def small_fold(small_panel):
    return make_folds(small_panel, seed=3)[0]
