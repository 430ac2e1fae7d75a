"""Acceptance gate: every criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS/FAIL line
per criterion.  The end-to-end smoke criterion searches and retrains on a
200-item planted panel and takes a few minutes on a desktop CPU.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from voxcast.baselines import BaselineKind, run_baseline
from voxcast.cli import main
from voxcast.embedding import (
    LevelClustering,
    derive_embedding,
    enumerate_candidates,
    mixed_embed,
    voxelize,
)
from voxcast.errors import Infeasible
from voxcast.metrics import mae, minmax_accuracy, rmse
from voxcast.panel import SyntheticSpec, generate_synthetic, make_folds
from voxcast.search import (
    BilevelConfig,
    EmbeddingSettings,
    gradient_check,
    preprocess_for_fold,
    run_search,
    train_derived,
)
from voxcast.selection import (
    SelectionProblem,
    brute_force_oracle,
    bundled_benchmark,
    solve_selection,
    solve_selection_robust,
)
from voxcast.supernet import (
    N_OPS,
    OP_ORDER,
    ArchParams,
    MixedOp,
    OpKind,
    SupernetConfig,
    build_primitive,
    derive_genotype,
    n_cell_edges,
)


@contextmanager
def criterion(name):
    try:
        yield
    except Exception:
        print(f"FAIL  {name}")
        raise
    print(f"PASS  {name}")


def balanced_clustering(axis, n_members, n_clusters):
    members = tuple(f"{axis[:1]}{i:02d}" for i in range(n_members))
    blocks = [[] for _ in range(n_clusters)]
    for i in range(n_members):
        blocks[i % n_clusters].append(i)
    return LevelClustering(axis=axis, members=members,
                           clusters=tuple(tuple(b) for b in blocks))


def random_selection_problem(rng, max_groups=5, max_models=6):
    n = int(rng.integers(1, max_groups + 1))
    m = int(rng.integers(1, max_models + 1))
    budget = float(rng.uniform(0.5, 10)) if rng.random() < 0.6 else math.inf
    return SelectionProblem(
        groups=tuple(str(i) for i in range(n)),
        sizes=tuple(int(s) for s in rng.integers(1, 50, size=n)),
        models=tuple(f"m{j}" for j in range(m)),
        accuracy=tuple(tuple(float(a) for a in rng.uniform(0, 1, size=m)) for _ in range(n)),
        std=tuple(tuple(float(s) for s in rng.uniform(0, 0.3, size=m)) for _ in range(n)),
        runtimes=tuple(float(t) for t in rng.uniform(0, 10, size=m)),
        budget=budget,
    )


class TestPaperNumbers:
    def test_published_selection_matrix(self):
        with criterion("selection IP reproduces the published 4-group assignment"):
            problem = bundled_benchmark()
            assert problem.sizes == (433, 19, 4, 2)
            start = time.perf_counter()
            result = solve_selection(problem)
            elapsed = time.perf_counter() - start
            assert result.chosen_models() == ("tab2vox", "xgboost", "dt", "lasso")
            assert abs(result.objective - 0.6555) <= 0.0015
            assert abs(result.objective - 0.6558) <= 0.0015
            assert elapsed < 1.0

    def test_unbounded_budget_is_argmax(self):
        with criterion("unbounded budget reduces to per-group argmax (100 instances)"):
            rng = np.random.default_rng(100)
            for _ in range(100):
                problem = random_selection_problem(rng)
                problem = SelectionProblem(
                    groups=problem.groups, sizes=problem.sizes, models=problem.models,
                    accuracy=problem.accuracy, std=problem.std,
                    runtimes=problem.runtimes, budget=math.inf,
                )
                result = solve_selection(problem)
                assert result.model_indices == tuple(
                    int(np.argmax(row)) for row in problem.accuracy
                )

    def test_candidate_space_counts(self):
        with criterion("cluster counts (5, 3, 2) give 1440 joint / 128 factorized"):
            cls = [
                balanced_clustering("feature", 10, 5),
                balanced_clustering("base", 6, 3),
                balanced_clustering("equipment", 4, 2),
            ]
            joint = enumerate_candidates(cls, mode="joint")
            assert joint.joint_size == 1440
            fact = enumerate_candidates(cls, mode="factorized")
            assert fact.axis_sizes == (120, 6, 2)
            assert fact.param_count == 128


class TestMetricSuite:
    def test_metric_examples_and_properties(self):
        with criterion("metric unit suite (examples 1e-9; rmse>=mae; scale invariance)"):
            tol = 1e-9
            assert abs(rmse([1, 2], [1, 2]) - 0.0) < tol
            assert abs(rmse([0, 0], [3, 4]) - math.sqrt(12.5)) < tol
            assert abs(rmse([0], [3]) - 3.0) < tol
            assert abs(mae([1, 2], [1, 2]) - 0.0) < tol
            assert abs(mae([0, 0], [1, -1]) - 1.0) < tol
            assert abs(mae([0, 0], [3, 4]) - 3.5) < tol
            assert abs(minmax_accuracy([5, 5], [5, 5]) - 1.0) < tol
            assert abs(minmax_accuracy([2, 8], [4, 4]) - 0.5) < tol
            assert abs(minmax_accuracy([0], [0]) - 1.0) < tol

            rng = np.random.default_rng(4)
            for _ in range(1000):
                n = int(rng.integers(1, 12))
                a = rng.normal(size=n)
                f = rng.normal(size=n)
                assert rmse(a, f) >= mae(a, f) - 1e-12

            a = rng.uniform(0, 10, size=25)
            f = rng.uniform(0, 10, size=25)
            base = minmax_accuracy(a, f)
            for lam in (0.5, 3.0):
                assert abs(minmax_accuracy(lam * a, lam * f) - base) <= 1e-12


class TestEmbeddingSuite:
    def _space(self):
        cls = [
            balanced_clustering("feature", 4, 2),
            balanced_clustering("base", 3, 2),
            balanced_clustering("equipment", 2, 2),
        ]
        return enumerate_candidates(cls, mode="factorized")

    def test_embedding_suite(self):
        with criterion("embedding suite (weights, shifts, one-hot, block swap)"):
            space = self._space()
            rng = np.random.default_rng(5)
            grid = rng.normal(size=(2, 3, 4, 3, 2))

            # softmax weights sum to one: permuting all-ones grid is a no-op
            ones = np.ones_like(grid)
            alphas = [rng.normal(size=s) for s in space.param_shapes]
            out = mixed_embed(ones, space, alphas).numpy()
            assert np.abs(out - 1.0).max() <= 1e-12

            # constant-shift invariance
            shifted = [a + 9.0 for a in alphas]
            d = np.abs(mixed_embed(grid, space, alphas).numpy()
                       - mixed_embed(grid, space, shifted).numpy())
            assert d.max() <= 1e-9
            assert derive_embedding(space, alphas) == derive_embedding(space, shifted)

            # saturated one-hot mixture equals the discrete arrangement exactly
            picks = (1, 0, 1)
            hot = []
            for size, p in zip(space.param_shapes, picks):
                v = np.zeros(size)
                v[p] = 1000.0
                hot.append(v)
            orders = [space.axis_perms[d][p] for d, p in enumerate(picks)]
            np.testing.assert_array_equal(
                mixed_embed(grid, space, hot).numpy(),
                voxelize(grid, space.clusterings, orders),
            )

            # swapping two cluster blocks swaps exactly those index ranges
            base = voxelize(grid, space.clusterings, [(0, 1), (0, 1), (0, 1)])
            swap = voxelize(grid, space.clusterings, [(1, 0), (0, 1), (0, 1)])
            blocks = space.clusterings[0].clusters
            swapped_positions = list(range(len(blocks[0]), 4)) + list(range(len(blocks[0])))
            np.testing.assert_array_equal(swap, np.take(base, swapped_positions, axis=2))


class TestGradientSuite:
    def test_gradients_match_finite_differences(self):
        with criterion("gradient suite (embed alpha, op alpha, conv weights) < 1e-4"):
            start = time.perf_counter()
            rng = np.random.default_rng(6)
            grid = rng.normal(size=(2, 3, 4, 3, 2))
            target = rng.normal(size=(2, 3, 4, 3, 2))

            # embedding mixture logits
            cls = [
                balanced_clustering("feature", 4, 2),
                balanced_clustering("base", 3, 2),
                balanced_clustering("equipment", 2, 2),
            ]
            space = enumerate_candidates(cls, mode="factorized")
            sizes = space.param_shapes

            def split(x):
                out, pos = [], 0
                for s in sizes:
                    out.append(x[pos:pos + s])
                    pos += s
                return out

            def embed_fn(x):
                with torch.no_grad():
                    out = mixed_embed(grid, space, [torch.as_tensor(v) for v in split(x)])
                    return float(((out - torch.as_tensor(target)) ** 2).sum())

            def embed_grad(x):
                alphas = [torch.tensor(v, requires_grad=True) for v in split(x)]
                loss = ((mixed_embed(grid, space, alphas) - torch.as_tensor(target)) ** 2).sum()
                loss.backward()
                return np.concatenate([a.grad.numpy() for a in alphas])

            point = rng.normal(size=sum(sizes))
            assert gradient_check(embed_fn, embed_grad, point, eps=1e-3) < 1e-4

            # mixed-op logits
            torch.manual_seed(6)
            op = MixedOp(3, stride=1).eval()
            x_t = torch.as_tensor(grid)
            probe = torch.as_tensor(target)

            def op_fn(a):
                with torch.no_grad():
                    w = torch.softmax(torch.as_tensor(a), dim=0)
                    return float((op(x_t, w) * probe).sum())

            def op_grad(a):
                alpha = torch.tensor(a, requires_grad=True)
                ((op(x_t, torch.softmax(alpha, dim=0)) * probe).sum()).backward()
                return alpha.grad.numpy()

            assert gradient_check(op_fn, op_grad, 0.1 * rng.normal(size=N_OPS), eps=1e-3) < 1e-4

            # convolution weights
            torch.manual_seed(7)
            conv_op = build_primitive(OpKind.CONV_3x3x3, 3, 1).eval()
            conv = conv_op.block[1]
            w_shape = tuple(conv.weight.shape)

            def conv_fn(w):
                with torch.no_grad():
                    conv.weight.copy_(torch.as_tensor(w))
                    return float((conv_op(x_t) * probe).sum())

            def conv_grad(w):
                with torch.no_grad():
                    conv.weight.copy_(torch.as_tensor(w))
                loss = (conv_op(x_t) * probe).sum()
                conv.weight.grad = None
                loss.backward()
                return conv.weight.grad.numpy()

            w0 = 0.1 * rng.normal(size=w_shape)
            assert gradient_check(conv_fn, conv_grad, w0, eps=1e-3) < 1e-4
            assert time.perf_counter() - start < 60.0


class TestSupernetShapes:
    def test_shape_suite(self):
        with criterion("shape suite (11 ops; stride contracts; genotype arity)"):
            assert len(OP_ORDER) == 11
            shapes = [(2, 3, 4, 3, 2), (1, 2, 1, 5, 1), (2, 2, 7, 2, 6)]
            for kind in OP_ORDER:
                for shape in shapes:
                    x = torch.randn(*shape, dtype=torch.float64)
                    y1 = build_primitive(kind, shape[1], 1)(x)
                    assert tuple(y1.shape) == shape
                    y2 = build_primitive(kind, shape[1], 2)(x)
                    halved = tuple(math.ceil(d / 2) for d in shape[2:])
                    assert tuple(y2.shape) == (shape[0], shape[1], *halved)
            rng = np.random.default_rng(8)
            for _ in range(50):
                arch = ArchParams(
                    normal=rng.normal(size=(n_cell_edges(2), N_OPS)),
                    reduce=rng.normal(size=(n_cell_edges(2), N_OPS)),
                )
                geno = derive_genotype(arch, nodes=2)
                for cell in (geno.normal, geno.reduce):
                    for node in cell:
                        assert len(node) == 2
                        assert all(op != "none" for op, _ in node)


class TestOracleEquivalence:
    def test_oracle_equivalence_and_monotonicity(self):
        with criterion("solver == brute force on 100 instances; budget monotone"):
            rng = np.random.default_rng(9)
            for _ in range(100):
                problem = random_selection_problem(rng)
                w1 = float(rng.uniform(0, 2))
                w2 = float(rng.uniform(0, 2))
                try:
                    want = brute_force_oracle(problem, w1=w1, w2=w2)
                except Infeasible:
                    with pytest.raises(Infeasible):
                        solve_selection_robust(problem, w1=w1, w2=w2)
                    continue
                got = solve_selection_robust(problem, w1=w1, w2=w2)
                assert got.model_indices == want.model_indices
                assert got.objective == want.objective
                if math.isinf(problem.budget):
                    plain = solve_selection(problem)
                    oracle = brute_force_oracle(problem)
                    assert plain.model_indices == oracle.model_indices

            for _ in range(15):
                base = random_selection_problem(rng)
                prev = -math.inf
                for t in sorted(rng.uniform(0.1, 12, size=5)):
                    problem = SelectionProblem(
                        groups=base.groups, sizes=base.sizes, models=base.models,
                        accuracy=base.accuracy, std=base.std, runtimes=base.runtimes,
                        budget=float(t),
                    )
                    try:
                        obj = solve_selection(problem).objective
                    except Infeasible:
                        continue
                    assert obj >= prev - 1e-12
                    prev = obj


class TestEndToEnd:
    def test_planted_panel_smoke(self):
        with criterion("end-to-end search + retrain beats arithmetic mean (<30 min)"):
            start = time.perf_counter()
            spec = SyntheticSpec(
                items=200, bases=4, equipment=3, years=6, features=8,
                feature_clusters=3, base_clusters=2, equipment_clusters=2,
                zero_inflation=0.3, noise_scale=0.05, seed=2024,
            )
            panel, _ = generate_synthetic(spec)
            fold = make_folds(panel, seed=1)[0]
            prepared, _ = preprocess_for_fold(panel, fold)

            am = run_baseline(BaselineKind.ARITHMETIC_MEAN, panel, fold)
            am_acc = minmax_accuracy(am.actual, am.forecast)

            sup = SupernetConfig(cells=4, nodes=2, width=8)
            emb = EmbeddingSettings(max_clusters={"feature": 5, "base": 4, "equipment": 3})
            genotype, history = run_search(
                prepared, fold,
                BilevelConfig(epochs=10, batch_size=24, seed=7),
                supernet_config=sup, embedding=emb,
            )
            assert history[-1]["val_loss"] <= history[0]["val_loss"]

            _, result = train_derived(
                genotype, prepared, fold,
                BilevelConfig(epochs=100, batch_size=24, seed=7), sup,
            )
            acc = minmax_accuracy(result.actual, result.forecast)
            elapsed = time.perf_counter() - start
            print(f"\n  [e2e] voxcnn {acc:.4f} vs am {am_acc:.4f}; "
                  f"val {history[0]['val_loss']:.4f}->{history[-1]['val_loss']:.4f}; "
                  f"{elapsed:.0f}s")
            assert acc >= am_acc
            assert elapsed < 1800.0


class TestDeterminism:
    CONFIG = {
        "seed": 21,
        "folds": 5,
        "synthetic": {"items": 10, "bases": 2, "equipment": 2, "years": 3,
                      "features": 4, "feature_clusters": 2, "base_clusters": 2,
                      "equipment_clusters": 2, "zero_inflation": 0.2,
                      "noise_scale": 0.05},
        "embedding": {"max_clusters": {"feature": 2, "base": 2, "equipment": 2}},
        "supernet": {"cells": 2, "nodes": 1, "width": 4},
        "search": {"epochs": 1, "batch_size": 4},
        "train": {"epochs": 2, "batch_size": 4},
        "baselines": ["arithmetic_mean", "weighted_moving_average"],
    }

    def _run_stages(self, tmp_path, name):
        out = tmp_path / name
        cfg_path = tmp_path / f"{name}.json"
        cfg = dict(self.CONFIG)
        cfg["out"] = str(out)
        cfg_path.write_text(json.dumps(cfg))
        c = str(cfg_path)
        assert main(["synth", "--config", c]) == 0
        assert main(["search", "--config", c, "--fold", "0"]) == 0
        assert main(["train", "--config", c, "--fold", "0"]) == 0
        assert main(["evaluate", "--config", c, "--fold", "0"]) == 0
        assert main(["select", "--problem", "bundled", "--config", c]) == 0
        return out

    def test_stage_reruns_are_byte_identical(self, tmp_path):
        with criterion("repeating every stage with one seed is byte-identical"):
            out1 = self._run_stages(tmp_path, "a")
            out2 = self._run_stages(tmp_path, "b")
            identical = [
                "panel.csv",
                "ground_truth.json",
                "fold0/genotype.json",
                "fold0/history.csv",
                "fold0/model.pt",
                "metrics.csv",
                "metrics.json",
                "selection.json",
            ]
            for rel in identical:
                assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes(), rel
            # results.csv carries measured wall-clock runtimes; everything else matches
            rows1 = [",".join(line.split(",")[:-1]) for line in
                     (out1 / "results.csv").read_text().splitlines()[1:]]
            rows2 = [",".join(line.split(",")[:-1]) for line in
                     (out2 / "results.csv").read_text().splitlines()[1:]]
            assert rows1 == rows2
