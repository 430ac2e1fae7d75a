import numpy as np
import pytest

from voxcast.errors import EmptyInput, LengthMismatch, NegativeValue
from voxcast.metrics import (
    ForecastResult,
    compare_models,
    mae,
    minmax_accuracy,
    read_results_csv,
    rmse,
    write_results_csv,
)


class TestRmse:
    def test_exact_match(self):
        assert rmse([1, 2, 3], [1, 2, 3]) == 0.0

    def test_hand_values(self):
        assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5), abs=1e-9)
        assert rmse([0], [3]) == pytest.approx(3.0, abs=1e-9)

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            rmse([1, 2], [1])
        with pytest.raises(EmptyInput):
            rmse([], [])


class TestMae:
    def test_exact_match(self):
        assert mae([5, 5], [5, 5]) == 0.0

    def test_hand_values(self):
        assert mae([0, 0], [1, -1]) == pytest.approx(1.0, abs=1e-9)
        assert mae([0, 0], [3, 4]) == pytest.approx(3.5, abs=1e-9)


class TestMinmax:
    def test_equal_is_one(self):
        assert minmax_accuracy([5, 5], [5, 5]) == 1.0

    def test_hand_value(self):
        assert minmax_accuracy([2, 8], [4, 4]) == pytest.approx(0.5, abs=1e-9)

    def test_both_zero_convention(self):
        assert minmax_accuracy([0], [0]) == 1.0

    def test_one_zero_is_zero(self):
        assert minmax_accuracy([0], [3]) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(NegativeValue):
            minmax_accuracy([-1], [1])
        with pytest.raises(NegativeValue):
            minmax_accuracy([1], [-1])


class TestMetricProperties:
    def test_minmax_identity_on_any_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.integers(0, 5, size=8).astype(float)
            assert minmax_accuracy(a, a) == 1.0

    def test_pairwise_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 10, size=20)
        f = rng.uniform(0, 10, size=20)
        assert minmax_accuracy(a, f) == pytest.approx(minmax_accuracy(f, a), abs=1e-15)
        assert rmse(a, f) == rmse(f, a)
        assert mae(a, f) == mae(f, a)

    def test_rmse_dominates_mae(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = rng.integers(1, 12)
            a = rng.normal(size=n)
            f = rng.normal(size=n)
            assert rmse(a, f) >= mae(a, f) - 1e-12

    def test_rmse_equals_mae_iff_constant_abs_diff(self):
        assert rmse([0, 0], [2, -2]) == pytest.approx(mae([0, 0], [2, -2]), abs=1e-12)
        assert rmse([0, 0], [1, 3]) > mae([0, 0], [1, 3])

    def test_scaling(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 10, size=15)
        f = rng.uniform(0, 10, size=15)
        for lam in (0.5, 3.0):
            assert minmax_accuracy(lam * a, lam * f) == pytest.approx(
                minmax_accuracy(a, f), abs=1e-12
            )
            assert rmse(lam * a, lam * f) == pytest.approx(lam * rmse(a, f), rel=1e-12)
            assert mae(lam * a, lam * f) == pytest.approx(lam * mae(a, f), rel=1e-12)


def _result(model, fold, actual, forecast, runtime=1.0):
    items = tuple(f"I{k}" for k in range(len(actual)))
    return ForecastResult(model, fold, items, tuple(actual), tuple(forecast), runtime)


class TestCompareModels:
    def test_identical_folds_zero_std(self):
        results = [_result("m", k, [2, 4], [3, 3]) for k in range(5)]
        report = compare_models(results)
        m = report.models[0]
        assert m.minmax_std == 0.0 and m.rmse_std == 0.0 and m.mae_std == 0.0

    def test_hand_mean_std(self):
        # per-fold accuracies 0.6, 0.62, 0.64, 0.66, 0.63 via single-pair folds
        accs = [0.6, 0.62, 0.64, 0.66, 0.63]
        results = [_result("m", k, [1.0], [acc]) for k, acc in enumerate(accs)]
        report = compare_models(results)
        m = report.models[0]
        assert m.minmax_mean == pytest.approx(0.63, abs=1e-12)
        assert m.minmax_std == pytest.approx(0.02, abs=1e-12)

    def test_single_model_is_best(self):
        report = compare_models([_result("only", 0, [1], [1])])
        assert report.best_model == "only"

    def test_best_by_minmax_tie_breaks_first(self):
        results = [
            _result("b", 0, [2], [1]),
            _result("a", 0, [2], [1]),
        ]
        assert compare_models(results).best_model == "b"

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        results = []
        for model in ("x", "y", "z"):
            for fold in range(3):
                a = rng.uniform(1, 5, size=4)
                f = rng.uniform(1, 5, size=4)
                results.append(_result(model, fold, a, f))
        r1 = compare_models(results)
        shuffled = [results[i] for i in rng.permutation(len(results))]
        r2 = compare_models(shuffled)
        by_id = {m.model_id: m for m in r2.models}
        for m in r1.models:
            assert by_id[m.model_id] == m
        assert r1.best_model == r2.best_model


class TestResultFiles:
    def test_roundtrip(self, tmp_path):
        results = [
            _result("am", 0, [1.0, 2.0], [1.5, 2.5], runtime=0.25),
            _result("am", 1, [3.0], [2.0], runtime=0.5),
            _result("other", 0, [1.0, 2.0], [0.5, 0.5], runtime=9.0),
        ]
        path = tmp_path / "results.csv"
        write_results_csv(results, path)
        again = read_results_csv(path)
        assert again == results
