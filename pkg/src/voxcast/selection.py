"""Item grouping and per-group forecaster assignment.

Each item group must pick exactly one forecasting model.  The solver
maximizes the item-share-weighted accuracy sum, optionally penalized by the
share-weighted accuracy deviation, subject to a share-weighted run-time
budget.  This is a multiple-choice knapsack solved exactly by depth-first
branch and bound; a brute-force enumerator with the identical tie-break rule
serves as the correctness oracle.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
from sklearn.cluster import AgglomerativeClustering
from sklearn.metrics import silhouette_score

from .errors import Infeasible, InstanceTooLarge, TooFewItems

BUDGET_TOL = 1e-12      # Eq-style feasibility slack on the run-time budget
PRUNE_MARGIN = 1e-9     # never prune branches within float noise of the best
ORACLE_CAP = 10**6


@dataclass(frozen=True)
class ItemGroup:
    """A block of the item partition plus the stats that defined it."""

    group_id: int
    items: tuple[str, ...]
    trace: dict

    @property
    def size(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class SelectionProblem:
    groups: tuple[str, ...]
    sizes: tuple[int, ...]
    models: tuple[str, ...]
    accuracy: tuple[tuple[float, ...], ...]
    std: tuple[tuple[float, ...], ...]
    runtimes: tuple[float, ...]
    budget: float = math.inf
    w1: float = 1.0
    w2: float = 0.0

    def __post_init__(self):
        n, m = len(self.groups), len(self.models)
        if n < 1 or m < 1:
            raise ValueError("need at least one group and one model")
        if len(self.sizes) != n:
            raise ValueError("sizes must align with groups")
        if len(self.accuracy) != n or any(len(r) != m for r in self.accuracy):
            raise ValueError("accuracy matrix must be |groups| x |models|")
        if len(self.std) != n or any(len(r) != m for r in self.std):
            raise ValueError("std matrix must be |groups| x |models|")
        if len(self.runtimes) != m:
            raise ValueError("runtimes must align with models")
        if any(s < 1 for s in self.sizes):
            raise ValueError("group sizes must be >= 1")
        if any(not 0.0 <= a <= 1.0 for row in self.accuracy for a in row):
            raise ValueError("accuracies must lie in [0, 1]")
        if any(s < 0 for row in self.std for s in row):
            raise ValueError("accuracy deviations must be >= 0")
        if any(t < 0 for t in self.runtimes):
            raise ValueError("runtimes must be >= 0")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("objective weights must be >= 0")

    @property
    def total_items(self) -> int:
        return sum(self.sizes)

    @property
    def shares(self) -> tuple[float, ...]:
        c = self.total_items
        return tuple(s / c for s in self.sizes)


@dataclass(frozen=True)
class SelectionResult:
    assignment: tuple[tuple[str, str], ...]   # (group_id, model_id) per group
    model_indices: tuple[int, ...]
    objective: float
    weighted_runtime: float
    optimal: bool = True

    def chosen_models(self) -> tuple[str, ...]:
        return tuple(m for _, m in self.assignment)

    def to_dict(self) -> dict:
        return {
            "assignment": [{"group": g, "model": m} for g, m in self.assignment],
            "objective": self.objective,
            "weighted_runtime": self.weighted_runtime,
            "optimal": self.optimal,
        }


# ---------------------------------------------------------------------------
# objective helpers (shared verbatim by solver and oracle so ties agree)
# ---------------------------------------------------------------------------

def _objective(problem: SelectionProblem, assign: Sequence[int], w1: float, w2: float) -> float:
    shares = problem.shares
    total = 0.0
    for i, j in enumerate(assign):
        total += w1 * shares[i] * problem.accuracy[i][j] - w2 * shares[i] * problem.std[i][j]
    return total


def _weighted_runtime(problem: SelectionProblem, assign: Sequence[int]) -> float:
    shares = problem.shares
    total = 0.0
    for i, j in enumerate(assign):
        total += shares[i] * problem.runtimes[j]
    return total


def _feasible(problem: SelectionProblem, assign: Sequence[int]) -> bool:
    return _weighted_runtime(problem, assign) <= problem.budget + BUDGET_TOL


def _make_result(problem: SelectionProblem, assign: Sequence[int], w1: float, w2: float) -> SelectionResult:
    assign = tuple(assign)
    return SelectionResult(
        assignment=tuple((g, problem.models[j]) for g, j in zip(problem.groups, assign)),
        model_indices=assign,
        objective=_objective(problem, assign, w1, w2),
        weighted_runtime=_weighted_runtime(problem, assign),
    )


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def solve_selection(problem: SelectionProblem) -> SelectionResult:
    """Exact accuracy-maximizing assignment under the run-time budget."""
    return _branch_and_bound(problem, w1=1.0, w2=0.0)


def solve_selection_robust(
    problem: SelectionProblem,
    w1: float | None = None,
    w2: float | None = None,
) -> SelectionResult:
    """Exact assignment for the deviation-penalized objective."""
    w1 = problem.w1 if w1 is None else w1
    w2 = problem.w2 if w2 is None else w2
    if w1 < 0 or w2 < 0:
        raise ValueError("objective weights must be >= 0")
    return _branch_and_bound(problem, w1=w1, w2=w2)


def _branch_and_bound(problem: SelectionProblem, w1: float, w2: float) -> SelectionResult:
    n, m = len(problem.groups), len(problem.models)
    shares = problem.shares
    terms = [
        [w1 * shares[i] * problem.accuracy[i][j] - w2 * shares[i] * problem.std[i][j]
         for j in range(m)]
        for i in range(n)
    ]
    # visit large groups first: their terms dominate the bound
    order = sorted(range(n), key=lambda i: (-problem.sizes[i], i))
    best_term = [max(terms[i]) for i in range(n)]
    suffix_best = [0.0] * (n + 1)
    for k in range(n - 1, -1, -1):
        suffix_best[k] = suffix_best[k + 1] + best_term[order[k]]
    min_rt = min(problem.runtimes)
    suffix_min_time = [0.0] * (n + 1)
    for k in range(n - 1, -1, -1):
        suffix_min_time[k] = suffix_min_time[k + 1] + shares[order[k]] * min_rt

    best: dict = {"obj": -math.inf, "assign": None}
    assign = [0] * n

    def visit(k: int, value: float, elapsed: float) -> None:
        if k == n:
            if not _feasible(problem, assign):
                return
            obj = _objective(problem, assign, w1, w2)
            if obj > best["obj"] or (obj == best["obj"] and tuple(assign) < best["assign"]):
                best["obj"] = obj
                best["assign"] = tuple(assign)
            return
        g = order[k]
        for j in range(m):
            t = elapsed + shares[g] * problem.runtimes[j]
            if t + suffix_min_time[k + 1] > problem.budget + BUDGET_TOL + PRUNE_MARGIN:
                continue
            v = value + terms[g][j]
            if v + suffix_best[k + 1] < best["obj"] - PRUNE_MARGIN:
                continue
            assign[g] = j
            visit(k + 1, v, t)
        assign[g] = 0

    visit(0, 0.0, 0.0)
    if best["assign"] is None:
        raise Infeasible("no assignment satisfies the run-time budget")
    return _make_result(problem, best["assign"], w1, w2)


def brute_force_oracle(
    problem: SelectionProblem,
    w1: float = 1.0,
    w2: float = 0.0,
) -> SelectionResult:
    """Exhaustive enumeration with the same tie-break (first in lexicographic order)."""
    n, m = len(problem.groups), len(problem.models)
    if m**n > ORACLE_CAP:
        raise InstanceTooLarge(f"{m}^{n} assignments exceed the {ORACLE_CAP} cap")
    best_obj = -math.inf
    best_assign = None
    for assign in itertools.product(range(m), repeat=n):
        if not _feasible(problem, assign):
            continue
        obj = _objective(problem, assign, w1, w2)
        if obj > best_obj:
            best_obj = obj
            best_assign = assign
    if best_assign is None:
        raise Infeasible("no assignment satisfies the run-time budget")
    return _make_result(problem, best_assign, w1, w2)


# ---------------------------------------------------------------------------
# item grouping
# ---------------------------------------------------------------------------

def cluster_items(
    item_stats: Mapping[str, tuple[float, float]],
    max_groups: int,
) -> list[ItemGroup]:
    """Partition items by (unit cost, mean annual demand) via Ward linkage.

    Group count is chosen in 2..max_groups by best silhouette; groups come
    back ordered by descending size.
    """
    if max_groups < 1:
        raise ValueError("max_groups must be >= 1")
    ids = sorted(item_stats)
    n = len(ids)
    if n < 2:
        raise TooFewItems("item grouping needs at least 2 items")
    X = np.array([[item_stats[i][0], item_stats[i][1]] for i in ids], dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd

    if max_groups == 1:
        labels = np.zeros(n, dtype=int)
    else:
        candidates = list(range(2, min(max_groups, n) + 1))
        scored = []
        for k in candidates:
            lab = AgglomerativeClustering(n_clusters=k, linkage="ward").fit_predict(Z)
            score = silhouette_score(Z, lab) if k < n else -np.inf
            scored.append((score, k, lab))
        if len(scored) > 1:
            best = max(scored, key=lambda t: (t[0], -t[1]))
        else:
            best = scored[0]
        labels = best[2]

    blocks: dict[int, list[str]] = {}
    for item, lab in zip(ids, labels):
        blocks.setdefault(int(lab), []).append(item)
    ordered = sorted(blocks.values(), key=lambda b: (-len(b), b[0]))
    groups = []
    for gid, members in enumerate(ordered):
        costs = [item_stats[i][0] for i in members]
        demands = [item_stats[i][1] for i in members]
        groups.append(ItemGroup(
            group_id=gid,
            items=tuple(members),
            trace={
                "cost_range": [float(min(costs)), float(max(costs))],
                "demand_range": [float(min(demands)), float(max(demands))],
            },
        ))
    return groups


# ---------------------------------------------------------------------------
# problem/result files
# ---------------------------------------------------------------------------

def save_problem(problem: SelectionProblem, path) -> None:
    payload = {
        "groups": [{"id": g, "size": s} for g, s in zip(problem.groups, problem.sizes)],
        "models": [{"id": m, "runtime_seconds": t} for m, t in zip(problem.models, problem.runtimes)],
        "accuracy": [list(row) for row in problem.accuracy],
        "std": [list(row) for row in problem.std],
        "budget_seconds": None if math.isinf(problem.budget) else problem.budget,
        "w1": problem.w1,
        "w2": problem.w2,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_problem(source) -> SelectionProblem:
    if hasattr(source, "read"):
        payload = json.load(source)
    else:
        with open(source) as fh:
            payload = json.load(fh)
    groups = tuple(str(g["id"]) for g in payload["groups"])
    sizes = tuple(int(g["size"]) for g in payload["groups"])
    models = tuple(str(m["id"]) for m in payload["models"])
    runtimes = tuple(float(m.get("runtime_seconds", 0.0)) for m in payload["models"])
    accuracy = tuple(tuple(float(a) for a in row) for row in payload["accuracy"])
    std_rows = payload.get("std")
    if std_rows is None:
        std = tuple(tuple(0.0 for _ in models) for _ in groups)
    else:
        std = tuple(tuple(float(s) for s in row) for row in std_rows)
    budget = payload.get("budget_seconds")
    return SelectionProblem(
        groups=groups,
        sizes=sizes,
        models=models,
        accuracy=accuracy,
        std=std,
        runtimes=runtimes,
        budget=math.inf if budget is None else float(budget),
        w1=float(payload.get("w1", 1.0)),
        w2=float(payload.get("w2", 0.0)),
    )


def bundled_benchmark() -> SelectionProblem:
    """The checked-in 4-group military-vehicle selection instance."""
    ref = resources.files("voxcast.data").joinpath("selection_benchmark.json")
    with ref.open() as fh:
        return load_problem(fh)
