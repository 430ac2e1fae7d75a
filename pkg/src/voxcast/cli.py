"""Command-line pipeline: synth | ingest | search | train | evaluate | select | report.

Configuration comes from one JSON file (see ``DEFAULT_CONFIG``) with flag
overrides winning over file values.  Stages communicate through files in the
output directory, so each stage can be re-run or resumed independently; every
artifact records the hash of the resolved config and the seed that produced
it.  Exit status: 0 on success, 1 on domain errors (error name on stderr),
2 on usage errors.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .baselines import BaselineKind, run_baseline
from .errors import VoxcastError
from .metrics import (
    ForecastResult,
    compare_models,
    minmax_accuracy,
    read_results_csv,
    write_results_csv,
)
from .panel import (
    DemandPanel,
    SyntheticSpec,
    generate_synthetic,
    impute_missing,
    ingest_panel,
    make_folds,
    normalize,
    remove_outliers,
    write_ground_truth,
    write_panel_csv,
)
from .search import (
    BilevelConfig,
    EmbeddingSettings,
    genotype_embedding,
    preprocess_for_fold,
    run_search,
    train_derived,
)
from .seeding import substream_seed
from .selection import (
    SelectionProblem,
    bundled_benchmark,
    cluster_items,
    load_problem,
    save_problem,
    solve_selection,
    solve_selection_robust,
)
from .supernet import SupernetConfig, load_genotype, save_genotype
from .embedding import render_voxel

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "runs/demo",
    "panel": None,
    "history_feature": "demand",
    "cost_feature": "unit_cost",
    "folds": 5,
    "synthetic": {
        "items": 40,
        "bases": 3,
        "equipment": 2,
        "years": 5,
        "features": 6,
        "feature_clusters": 2,
        "base_clusters": 2,
        "equipment_clusters": 2,
        "zero_inflation": 0.3,
        "noise_scale": 0.05,
    },
    "embedding": {
        "mode": "factorized",
        "joint_cap": 2000,
        "max_clusters": {"feature": 5, "base": 4, "equipment": 3},
    },
    "supernet": {"cells": 4, "nodes": 2, "width": 8},
    "search": {
        "epochs": 3,
        "batch_size": 16,
        "w_lr": 0.01,
        "w_momentum": 0.9,
        "arch_lr": 0.001,
        "arch_init_noise": 0.001,
        "checkpoint_every": 0,
    },
    "train": {"epochs": 20, "batch_size": 16, "w_lr": 0.01, "w_momentum": 0.9},
    "baselines": [
        "arithmetic_mean",
        "simple_exponential_smoothing",
        "weighted_moving_average",
        "linear_regression",
        "decision_tree",
    ],
    "selector": {"budget_seconds": None, "w1": 1.0, "w2": 0.0, "max_groups": 4},
}


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------

def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["out"] = args.out
    if getattr(args, "panel", None):
        cfg["panel"] = args.panel
    if getattr(args, "epochs", None) is not None:
        stage = {"search": "search", "train": "train", "evaluate": "train"}.get(args.command)
        if stage:
            cfg[stage]["epochs"] = args.epochs
    if getattr(args, "budget_seconds", None) is not None:
        cfg["selector"]["budget_seconds"] = args.budget_seconds
    if getattr(args, "w1", None) is not None:
        cfg["selector"]["w1"] = args.w1
    if getattr(args, "w2", None) is not None:
        cfg["selector"]["w2"] = args.w2
    if getattr(args, "max_groups", None) is not None:
        cfg["selector"]["max_groups"] = args.max_groups
    return cfg


def config_hash(cfg: dict) -> str:
    # the output directory is execution context, not configuration identity
    hashed = {k: v for k, v in cfg.items() if k != "out"}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(payload: dict, path: Path, cfg: dict) -> None:
    stamped = dict(payload)
    stamped["config_hash"] = config_hash(cfg)
    stamped["seed"] = cfg["seed"]
    with open(path, "w") as fh:
        json.dump(stamped, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(frame: pd.DataFrame, path: Path, cfg: dict) -> None:
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash(cfg)} seed={cfg['seed']}\n")
        frame.to_csv(fh, index=False, float_format="%.17g")


def _stamp_results_csv(path: Path, cfg: dict, results) -> None:
    tmp = path.with_suffix(".tmp")
    write_results_csv(results, tmp)
    with open(tmp) as fh:
        body = fh.read()
    with open(path, "w") as fh:
        fh.write(f"# config_hash={config_hash(cfg)} seed={cfg['seed']}\n")
        fh.write(body)
    os.remove(tmp)


# ---------------------------------------------------------------------------
# shared stage helpers
# ---------------------------------------------------------------------------

def _load_panel(cfg: dict) -> DemandPanel:
    if cfg["panel"]:
        path = cfg["panel"]
    else:
        path = _out_dir(cfg) / "panel.csv"
        if not path.exists():
            raise VoxcastError(
                "no panel available: set 'panel' in the config or run `voxcast synth` first"
            )
    return ingest_panel(path, history_feature=cfg.get("history_feature"))


def _folds(cfg: dict, panel: DemandPanel):
    return make_folds(panel, seed=substream_seed(cfg["seed"], "folds"), n_folds=cfg["folds"])


def _selected_folds(args, cfg, panel):
    folds = _folds(cfg, panel)
    if getattr(args, "fold", None) is not None:
        if not 0 <= args.fold < len(folds):
            raise VoxcastError(f"fold must be in 0..{len(folds) - 1}")
        return [folds[args.fold]]
    return folds


def _supernet_config(cfg: dict) -> SupernetConfig:
    sup = cfg["supernet"]
    return SupernetConfig(
        cells=sup["cells"],
        nodes=sup["nodes"],
        width=sup["width"],
        batch_size=cfg["search"]["batch_size"],
        seed=substream_seed(cfg["seed"], "supernet"),
    )


def _embedding_settings(cfg: dict) -> EmbeddingSettings:
    emb = cfg["embedding"]
    return EmbeddingSettings(
        mode=emb["mode"],
        joint_cap=emb["joint_cap"],
        max_clusters=dict(emb["max_clusters"]),
    )


def _bilevel_config(cfg: dict, stage: str, seed_name: str) -> BilevelConfig:
    section = cfg[stage]
    return BilevelConfig(
        epochs=section["epochs"],
        batch_size=section["batch_size"],
        w_lr=section["w_lr"],
        w_momentum=section["w_momentum"],
        arch_lr=section.get("arch_lr", 0.001),
        arch_init_noise=section.get("arch_init_noise", 0.001),
        checkpoint_every=section.get("checkpoint_every", 0),
        seed=substream_seed(cfg["seed"], seed_name),
    )


def _derived_result(cfg: dict, panel: DemandPanel, fold) -> ForecastResult:
    """Reuse `train` output when present, otherwise retrain from the genotype."""
    out = _out_dir(cfg)
    pred_path = out / f"fold{fold.fold}" / "predictions.csv"
    if pred_path.exists():
        return read_results_csv(pred_path)[0]
    geno_path = out / f"fold{fold.fold}" / "genotype.json"
    if not geno_path.exists():
        raise VoxcastError(
            f"fold {fold.fold}: run `voxcast search` (and optionally `voxcast train`) first"
        )
    genotype = load_genotype(geno_path)
    prepared, _ = preprocess_for_fold(panel, fold)
    _, result = train_derived(
        genotype,
        prepared,
        fold,
        _bilevel_config(cfg, "train", f"train-fold{fold.fold}"),
        _supernet_config(cfg),
    )
    return result


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    section = dict(cfg["synthetic"])
    section.setdefault("seed", substream_seed(cfg["seed"], "data"))
    spec = SyntheticSpec(**section)
    panel, truth = generate_synthetic(spec)
    write_panel_csv(panel, out / "panel.csv")
    truth["config_hash"] = config_hash(cfg)
    truth["seed"] = cfg["seed"]
    write_ground_truth(truth, out / "ground_truth.json")
    print(f"synth: wrote {panel.n_records} records to {out / 'panel.csv'}")
    return 0


def cmd_ingest(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    panel = _load_panel(cfg)
    cleaned = impute_missing(remove_outliers(panel))
    normalized, stats = normalize(cleaned)
    write_panel_csv(normalized, out / "panel_clean.csv")
    _write_json(stats.to_dict(), out / "normalization.json", cfg)
    print(
        f"ingest: {panel.n_records} records, {panel.schema.n_features} features, "
        f"{len(panel.items)} items -> {out / 'panel_clean.csv'}"
    )
    return 0


def cmd_search(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    panel = _load_panel(cfg)
    for fold in _selected_folds(args, cfg, panel):
        fold_dir = out / f"fold{fold.fold}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        prepared, _ = preprocess_for_fold(panel, fold)
        config = _bilevel_config(cfg, "search", f"search-fold{fold.fold}")
        ckpt_dir = None
        if config.checkpoint_every > 0:
            ckpt_dir = fold_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
        genotype, history = run_search(
            prepared,
            fold,
            config,
            supernet_config=_supernet_config(cfg),
            embedding=_embedding_settings(cfg),
            checkpoint_dir=ckpt_dir,
        )
        save_genotype(
            genotype,
            fold_dir / "genotype.json",
            meta={"config_hash": config_hash(cfg), "seed": cfg["seed"], "fold": fold.fold},
        )
        _write_csv(pd.DataFrame(history), fold_dir / "history.csv", cfg)
        final = history[-1]["val_loss"] if history else float("nan")
        print(f"search fold {fold.fold}: {len(history)} epochs, final val loss {final:.6f}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    panel = _load_panel(cfg)
    for fold in _selected_folds(args, cfg, panel):
        fold_dir = out / f"fold{fold.fold}"
        geno_path = fold_dir / "genotype.json"
        if not geno_path.exists():
            raise VoxcastError(f"fold {fold.fold}: missing {geno_path}; run `voxcast search`")
        genotype = load_genotype(geno_path)
        prepared, _ = preprocess_for_fold(panel, fold)
        net, result = train_derived(
            genotype,
            prepared,
            fold,
            _bilevel_config(cfg, "train", f"train-fold{fold.fold}"),
            _supernet_config(cfg),
        )
        torch.save(net.state_dict(), fold_dir / "model.pt")
        _stamp_results_csv(fold_dir / "predictions.csv", cfg, [result])
        acc = minmax_accuracy(result.actual, result.forecast)
        print(f"train fold {fold.fold}: test min-max accuracy {acc:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    panel = _load_panel(cfg)
    results: list[ForecastResult] = []
    for fold in _selected_folds(args, cfg, panel):
        prepared, _ = preprocess_for_fold(panel, fold)
        results.append(_derived_result(cfg, panel, fold))
        for name in cfg["baselines"]:
            kind = BaselineKind(name)
            source = prepared if kind in (
                BaselineKind.LINEAR_REGRESSION, BaselineKind.DECISION_TREE
            ) else panel
            results.append(run_baseline(kind, source, fold,
                                        seed=substream_seed(cfg["seed"], f"baseline-{name}")))
    report = compare_models(results)
    _stamp_results_csv(out / "results.csv", cfg, results)
    _write_csv(report.to_frame(include_runtime=False), out / "metrics.csv", cfg)
    payload = {
        "best_model": report.best_model,
        "models": [
            {
                "model": m.model_id, "n_folds": m.n_folds,
                "minmax_mean": m.minmax_mean, "minmax_std": m.minmax_std,
                "rmse_mean": m.rmse_mean, "rmse_std": m.rmse_std,
                "mae_mean": m.mae_mean, "mae_std": m.mae_std,
            }
            for m in report.models
        ],
    }
    _write_json(payload, out / "metrics.json", cfg)
    print(f"evaluate: best model by mean min-max accuracy = {report.best_model}")
    return 0


def _problem_from_results(cfg: dict, panel: DemandPanel) -> SelectionProblem:
    out = _out_dir(cfg)
    results_path = out / "results.csv"
    if not results_path.exists():
        raise VoxcastError("missing results.csv; run `voxcast evaluate` first")
    results = read_results_csv(results_path)
    cleaned = impute_missing(remove_outliers(panel))

    cost_feature = cfg.get("cost_feature")
    frame = cleaned.frame
    costs = (
        frame.groupby("item")[cost_feature].mean()
        if cost_feature in cleaned.schema.feature_ids
        else pd.Series(0.0, index=list(cleaned.items))
    )
    stats = {}
    for item in cleaned.items:
        history = cleaned.history_series(item)
        history = history[~np.isnan(history)]
        demand = float(history.mean()) if history.size else 0.0
        stats[item] = (float(costs.get(item, 0.0)), demand)
    groups = cluster_items(stats, max_groups=cfg["selector"]["max_groups"])

    model_ids, order = [], {}
    for r in results:
        if r.model_id not in order:
            order[r.model_id] = len(model_ids)
            model_ids.append(r.model_id)
    acc = np.zeros((len(groups), len(model_ids)))
    std = np.zeros_like(acc)
    runtimes = np.zeros(len(model_ids))
    counts = np.zeros(len(model_ids))
    by_model: dict[str, list[ForecastResult]] = {}
    for r in results:
        by_model.setdefault(r.model_id, []).append(r)
        runtimes[order[r.model_id]] += r.runtime_seconds
        counts[order[r.model_id]] += 1
    runtimes = runtimes / np.maximum(counts, 1)

    for gi, group in enumerate(groups):
        members = set(group.items)
        for model_id, rs in by_model.items():
            fold_scores = []
            for r in rs:
                pick = [k for k, it in enumerate(r.items) if it in members]
                if pick:
                    fold_scores.append(minmax_accuracy(
                        [r.actual[k] for k in pick], [r.forecast[k] for k in pick]
                    ))
            j = order[model_id]
            if fold_scores:
                acc[gi, j] = float(np.mean(fold_scores))
                std[gi, j] = float(np.std(fold_scores))
    budget = cfg["selector"]["budget_seconds"]
    return SelectionProblem(
        groups=tuple(str(g.group_id) for g in groups),
        sizes=tuple(g.size for g in groups),
        models=tuple(model_ids),
        accuracy=tuple(tuple(row) for row in acc),
        std=tuple(tuple(row) for row in std),
        runtimes=tuple(float(t) for t in runtimes),
        budget=math.inf if budget is None else float(budget),
        w1=cfg["selector"]["w1"],
        w2=cfg["selector"]["w2"],
    )


def cmd_select(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    if getattr(args, "problem", None):
        if args.problem == "bundled":
            problem = bundled_benchmark()
        else:
            problem = load_problem(args.problem)
        sel = cfg["selector"]
        overrides = {}
        if sel["budget_seconds"] is not None:
            overrides["budget"] = float(sel["budget_seconds"])
        if overrides or sel["w1"] != 1.0 or sel["w2"] != 0.0:
            problem = SelectionProblem(
                groups=problem.groups, sizes=problem.sizes, models=problem.models,
                accuracy=problem.accuracy, std=problem.std, runtimes=problem.runtimes,
                budget=overrides.get("budget", problem.budget),
                w1=sel["w1"], w2=sel["w2"],
            )
    else:
        problem = _problem_from_results(cfg, _load_panel(cfg))
        save_problem(problem, out / "selection_problem.json")

    if problem.w2 > 0:
        result = solve_selection_robust(problem)
    else:
        result = solve_selection(problem)
    payload = result.to_dict()
    payload["models"] = list(result.chosen_models())
    _write_json(payload, out / "selection.json", cfg)
    chosen = ", ".join(f"{g}->{m}" for g, m in result.assignment)
    print(f"select: objective {result.objective:.4f}; {chosen}")
    return 0


def _markdown_table(frame: pd.DataFrame) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    header = "| " + " | ".join(frame.columns) + " |"
    sep = "|" + "|".join(" --- " for _ in frame.columns) + "|"
    rows = ["| " + " | ".join(fmt(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, sep, *rows])


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    meta = {"Software": "voxcast", "Comment": f"config_hash={config_hash(cfg)} seed={cfg['seed']}"}

    lines = ["# Run report", ""]

    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        table = pd.read_csv(metrics_path, comment="#")
        lines += ["## Metrics", "", _markdown_table(table), ""]
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar(table["model"], table["minmax_mean"], yerr=table["minmax_std"], capsize=3)
        ax.set_ylabel("min-max accuracy (mean over folds)")
        ax.set_xlabel("model")
        fig.tight_layout()
        fig.savefig(plots / "accuracy.png", metadata=meta)
        plt.close(fig)

    for fold_dir in sorted(out.glob("fold*")):
        hist_path = fold_dir / "history.csv"
        if not hist_path.exists():
            continue
        hist = pd.read_csv(hist_path, comment="#")
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(hist["epoch"], hist["train_loss"], label="train")
        ax.plot(hist["epoch"], hist["val_loss"], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(plots / f"loss_{fold_dir.name}.png", metadata=meta)
        plt.close(fig)

    geno_path = out / "fold0" / "genotype.json"
    if geno_path.exists():
        panel = _load_panel(cfg)
        folds = _folds(cfg, panel)
        item = getattr(args, "item", None) or folds[0].test[0]
        genotype = load_genotype(geno_path)
        clusterings, orders = genotype_embedding(genotype)
        prepared, _ = preprocess_for_fold(panel, folds[0])
        voxel = render_voxel(prepared, item, clusterings, orders)
        n_years = voxel.values.shape[0]
        fig, axes = plt.subplots(1, n_years, figsize=(3 * n_years, 3), squeeze=False)
        for y in range(n_years):
            img = voxel.values[y].reshape(voxel.values.shape[1], -1)
            axes[0][y].imshow(img, aspect="auto", cmap="viridis")
            axes[0][y].set_title(f"year {voxel.years[y]}")
            axes[0][y].set_xlabel("base x equipment")
            if y == 0:
                axes[0][y].set_ylabel("feature")
        fig.suptitle(f"voxel channels for item {item}")
        fig.tight_layout()
        fig.savefig(plots / f"voxel_{item}.png", metadata=meta)
        plt.close(fig)
        lines += ["## Voxel sample", "", f"Item `{item}` channel slices: plots/voxel_{item}.png", ""]

    sel_path = out / "selection.json"
    if sel_path.exists():
        with open(sel_path) as fh:
            sel = json.load(fh)
        lines += ["## Selection", "", f"Objective: {sel['objective']:.4f}", ""]
        for entry in sel["assignment"]:
            lines.append(f"- group {entry['group']}: {entry['model']}")
        lines.append("")

    with open(out / "report.md", "w") as fh:
        fh.write("\n".join(lines))
    print(f"report: wrote {out / 'report.md'} and {plots}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxcast",
        description="Voxel-embedding demand forecasting pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="top-level seed (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")

    p = sub.add_parser("synth", help="generate a synthetic panel with ground truth")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate, clean, and normalize a panel")
    common(p)
    p.add_argument("--panel", help="panel CSV to ingest (overrides config)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("search", help="run the bilevel architecture search per fold")
    common(p)
    p.add_argument("--panel", help="panel CSV (overrides config)")
    p.add_argument("--fold", type=int, help="restrict to one fold")
    p.add_argument("--epochs", type=int, help="search epochs (overrides config)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="retrain the derived architecture per fold")
    common(p)
    p.add_argument("--panel", help="panel CSV (overrides config)")
    p.add_argument("--fold", type=int, help="restrict to one fold")
    p.add_argument("--epochs", type=int, help="training epochs (overrides config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run baselines plus the derived model")
    common(p)
    p.add_argument("--panel", help="panel CSV (overrides config)")
    p.add_argument("--fold", type=int, help="restrict to one fold")
    p.add_argument("--epochs", type=int, help="derived training epochs (overrides config)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select", help="solve the per-group model assignment")
    common(p)
    p.add_argument("--problem", help="selection problem JSON, or 'bundled'")
    p.add_argument("--budget-seconds", type=float, dest="budget_seconds",
                   help="run-time budget (overrides config)")
    p.add_argument("--w1", type=float, help="accuracy weight (overrides config)")
    p.add_argument("--w2", type=float, help="deviation weight (overrides config)")
    p.add_argument("--max-groups", type=int, dest="max_groups",
                   help="max item groups when clustering (overrides config)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("report", help="emit metric tables, loss curves, and voxel heat maps")
    common(p)
    p.add_argument("--panel", help="panel CSV (overrides config)")
    p.add_argument("--item", help="item id for the voxel heat map")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VoxcastError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
