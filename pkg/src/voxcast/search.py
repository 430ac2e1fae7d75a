"""First-order bilevel search over embedding and cell architectures.

Each step updates the supernet weights on a training batch, then updates the
architecture logits (embedding mixture and cell edges together) on a
validation batch with the weights held fixed.  Deriving the argmax
architecture and retraining it discretely lives here too, along with a
generic central-difference gradient checker.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .embedding import (
    AXES,
    DEFAULT_JOINT_CAP,
    DEFAULT_MAX_CLUSTERS,
    CandidateMappingSpace,
    LevelClustering,
    cluster_levels,
    derive_embedding,
    enumerate_candidates,
    mixed_embed,
    voxelize,
)
from .errors import InvalidEpsilon, NonFiniteLoss
from .metrics import ForecastResult
from .panel import DemandPanel, FoldSplit, impute_missing, normalize, remove_outliers
from .seeding import substream_seed
from .supernet import DerivedNet, Genotype, Supernet, SupernetConfig, derive_genotype

DERIVED_MODEL_ID = "voxcnn"


@dataclass(frozen=True)
class BilevelConfig:
    epochs: int = 10
    batch_size: int = 16
    w_lr: float = 0.01
    w_momentum: float = 0.9
    grad_clip: float = 5.0
    arch_lr: float = 1e-3
    arch_betas: tuple[float, float] = (0.5, 0.999)
    arch_init_noise: float = 1e-3
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.w_lr < 0 or self.arch_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")


@dataclass(frozen=True)
class EmbeddingSettings:
    mode: str = "factorized"
    joint_cap: int = DEFAULT_JOINT_CAP
    max_clusters: Mapping[str, int] = field(
        default_factory=lambda: dict(DEFAULT_MAX_CLUSTERS)
    )


class EmbeddingMixer(nn.Module):
    """Owns the embedding logits and renders the mixed voxel batch."""

    def __init__(self, space: CandidateMappingSpace, noise: float = 0.0, seed: int = 0):
        super().__init__()
        self.space = space
        gen = torch.Generator().manual_seed(seed)
        self.alphas = nn.ParameterList(
            nn.Parameter(noise * torch.randn(size, generator=gen, dtype=torch.float64))
            for size in space.param_shapes
        )

    def forward(self, grids: torch.Tensor) -> torch.Tensor:
        return mixed_embed(grids, self.space, list(self.alphas))

    def derive_orders(self) -> tuple[tuple[int, ...], ...]:
        return derive_embedding(self.space, list(self.alphas))


@dataclass(frozen=True)
class TargetScaler:
    mean: float
    std: float

    @classmethod
    def fit(cls, values: np.ndarray) -> "TargetScaler":
        std = float(np.std(values))
        return cls(mean=float(np.mean(values)), std=std if std > 0 else 1.0)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass
class SearchState:
    mixer: EmbeddingMixer
    net: Supernet
    w_opt: torch.optim.Optimizer
    a_opt: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    last_train_loss: float | None = None
    last_val_loss: float | None = None


def _mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.mean((pred.reshape(-1) - target.reshape(-1)) ** 2)


def _require_finite(loss: torch.Tensor, phase: str, state: SearchState) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLoss(
            f"{phase} loss became non-finite",
            diagnostics={
                "phase": phase,
                "epoch": state.epoch,
                "step": state.step,
                "loss": float(loss.detach()),
            },
        )


def search_step(
    state: SearchState,
    train_batch: tuple[torch.Tensor, torch.Tensor],
    val_batch: tuple[torch.Tensor, torch.Tensor],
    config: BilevelConfig,
) -> SearchState:
    """One bilevel step: weights on train loss, then logits on validation loss."""
    x_t, y_t = train_batch
    x_v, y_v = val_batch
    state.net.train()

    loss_t = _mse(state.net(state.mixer(x_t)), y_t)
    _require_finite(loss_t, "train", state)
    state.w_opt.zero_grad(set_to_none=True)
    state.a_opt.zero_grad(set_to_none=True)
    loss_t.backward()
    if config.grad_clip > 0:
        stepped = [p for g in state.w_opt.param_groups for p in g["params"]]
        torch.nn.utils.clip_grad_norm_(stepped, config.grad_clip)
    state.w_opt.step()

    loss_v = _mse(state.net(state.mixer(x_v)), y_v)
    _require_finite(loss_v, "validation", state)
    state.a_opt.zero_grad(set_to_none=True)
    state.w_opt.zero_grad(set_to_none=True)
    loss_v.backward()
    state.a_opt.step()

    state.step += 1
    state.last_train_loss = float(loss_t.detach())
    state.last_val_loss = float(loss_v.detach())
    return state


# ---------------------------------------------------------------------------
# full search runs
# ---------------------------------------------------------------------------

def preprocess_for_fold(panel: DemandPanel, fold: FoldSplit):
    """Outlier fencing, imputation, and train-only normalization."""
    cleaned = impute_missing(remove_outliers(panel))
    return normalize(cleaned, train_items=fold.train)


def _stack_items(panel: DemandPanel, items: Sequence[str]) -> torch.Tensor:
    return torch.from_numpy(panel.grids(items))


def _epoch_losses(state: SearchState, train, val) -> tuple[float, float]:
    state.net.eval()
    with torch.no_grad():
        t = float(_mse(state.net(state.mixer(train[0])), train[1]))
        v = float(_mse(state.net(state.mixer(val[0])), val[1]))
    state.net.train()
    return t, v


def build_search_state(
    space: CandidateMappingSpace,
    in_channels: int,
    config: BilevelConfig,
    supernet_config: SupernetConfig,
) -> SearchState:
    mixer = EmbeddingMixer(
        space,
        noise=config.arch_init_noise,
        seed=substream_seed(config.seed, "embedding-init"),
    )
    torch.manual_seed(substream_seed(config.seed, "supernet-init"))
    net = Supernet(in_channels, supernet_config, alpha_noise=config.arch_init_noise)
    w_opt = torch.optim.SGD(net.weight_parameters(), lr=config.w_lr, momentum=config.w_momentum)
    a_opt = torch.optim.Adam(
        list(mixer.parameters()) + net.arch_parameters(),
        lr=config.arch_lr,
        betas=config.arch_betas,
    )
    return SearchState(mixer=mixer, net=net, w_opt=w_opt, a_opt=a_opt)


def run_search(
    panel: DemandPanel,
    fold: FoldSplit,
    config: BilevelConfig,
    supernet_config: SupernetConfig | None = None,
    embedding: EmbeddingSettings | None = None,
    checkpoint_dir=None,
    resume_from=None,
) -> tuple[Genotype, list[dict]]:
    """Cluster axes, search both architectures, and derive the genotype.

    The panel must already be preprocessed (imputed and normalized on the
    fold's training items).  Deterministic under ``config.seed``.
    """
    supernet_config = supernet_config or SupernetConfig()
    embedding = embedding or EmbeddingSettings()

    cluster_seed = substream_seed(config.seed, "clustering")
    train_panel = panel.subset(fold.train)
    clusterings = tuple(
        cluster_levels(train_panel, axis, embedding.max_clusters.get(axis, 1), seed=cluster_seed)
        for axis in AXES
    )
    space = enumerate_candidates(clusterings, mode=embedding.mode, cap=embedding.joint_cap)

    train_x = _stack_items(panel, fold.train)
    val_x = _stack_items(panel, fold.val)
    actuals = panel.item_actuals(fold.train + fold.val)
    scaler = TargetScaler.fit(np.array([actuals[it] for it in fold.train]))
    train_y = torch.from_numpy(scaler.transform(np.array([actuals[it] for it in fold.train])))
    val_y = torch.from_numpy(scaler.transform(np.array([actuals[it] for it in fold.val])))

    state = build_search_state(space, len(panel.years), config, supernet_config)
    if resume_from is not None:
        load_checkpoint(resume_from, state)

    n_train, n_val = len(fold.train), len(fold.val)
    search_seed = substream_seed(config.seed, "search")
    for epoch in range(state.epoch, config.epochs):
        rng = np.random.default_rng(substream_seed(search_seed, f"epoch{epoch}"))
        train_order = rng.permutation(n_train)
        val_order = rng.permutation(n_val)
        n_batches = math.ceil(n_train / config.batch_size)
        for b in range(n_batches):
            t_idx = train_order[b * config.batch_size : (b + 1) * config.batch_size]
            v_start = (b * config.batch_size) % n_val
            v_idx = np.take(val_order, range(v_start, v_start + min(config.batch_size, n_val)), mode="wrap")
            search_step(
                state,
                (train_x[t_idx], train_y[t_idx]),
                (val_x[v_idx], val_y[v_idx]),
                config,
            )
        t_loss, v_loss = _epoch_losses(state, (train_x, train_y), (val_x, val_y))
        state.epoch = epoch + 1
        state.history.append({"epoch": state.epoch, "train_loss": t_loss, "val_loss": v_loss})
        if (
            checkpoint_dir is not None
            and config.checkpoint_every > 0
            and state.epoch % config.checkpoint_every == 0
        ):
            save_checkpoint(state, os.path.join(checkpoint_dir, f"checkpoint_{state.epoch:04d}.pt"))

    orders = state.mixer.derive_orders()
    genotype = derive_genotype(
        state.net.arch_params(),
        supernet_config.nodes,
        embedding={
            "mode": space.mode,
            "orders": {axes_name: list(o) for axes_name, o in zip(AXES, orders)},
            "clusterings": {c.axis: c.to_dict() for c in clusterings},
        },
    )
    return genotype, list(state.history)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: SearchState, path) -> None:
    payload = {
        "version": 1,
        "epoch": state.epoch,
        "step": state.step,
        "history": list(state.history),
        "net": state.net.state_dict(),
        "mixer": state.mixer.state_dict(),
        "w_opt": state.w_opt.state_dict(),
        "a_opt": state.a_opt.state_dict(),
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, state: SearchState) -> SearchState:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    state.net.load_state_dict(payload["net"])
    state.mixer.load_state_dict(payload["mixer"])
    state.w_opt.load_state_dict(payload["w_opt"])
    state.a_opt.load_state_dict(payload["a_opt"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.history = list(payload["history"])
    return state


# ---------------------------------------------------------------------------
# derived retraining
# ---------------------------------------------------------------------------

def genotype_embedding(genotype: Genotype) -> tuple[tuple[LevelClustering, ...], tuple[tuple[int, ...], ...]]:
    if not genotype.embedding:
        raise ValueError("genotype carries no embedding block")
    payload = genotype.embedding
    clusterings = tuple(
        LevelClustering.from_dict(payload["clusterings"][axis]) for axis in AXES
    )
    orders = tuple(tuple(int(i) for i in payload["orders"][axis]) for axis in AXES)
    return clusterings, orders


def train_derived(
    genotype: Genotype,
    panel: DemandPanel,
    fold: FoldSplit,
    config: BilevelConfig,
    supernet_config: SupernetConfig | None = None,
) -> tuple[DerivedNet, ForecastResult]:
    """Train the discrete network on train+validation items, forecast test items."""
    start = time.perf_counter()
    supernet_config = supernet_config or SupernetConfig()
    clusterings, orders = genotype_embedding(genotype)

    fit_items = tuple(fold.train) + tuple(fold.val)
    test_items = tuple(fold.test)
    fit_x = torch.from_numpy(voxelize(panel.grids(fit_items), clusterings, orders))
    test_x = torch.from_numpy(voxelize(panel.grids(test_items), clusterings, orders))
    actuals = panel.item_actuals(fit_items + test_items)
    fit_a = np.array([actuals[it] for it in fit_items])
    scaler = TargetScaler.fit(fit_a)
    fit_y = torch.from_numpy(scaler.transform(fit_a))

    torch.manual_seed(substream_seed(config.seed, "derived-init"))
    net = DerivedNet(len(panel.years), supernet_config, genotype)
    opt = torch.optim.SGD(net.parameters(), lr=config.w_lr, momentum=config.w_momentum)

    train_seed = substream_seed(config.seed, "derived-train")
    n = len(fit_items)
    net.train()
    for epoch in range(config.epochs):
        rng = np.random.default_rng(substream_seed(train_seed, f"epoch{epoch}"))
        order = rng.permutation(n)
        for b in range(math.ceil(n / config.batch_size)):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            loss = _mse(net(fit_x[idx]), fit_y[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    "derived training loss became non-finite",
                    diagnostics={"epoch": epoch, "batch": b, "loss": float(loss.detach())},
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(net.parameters(), config.grad_clip)
            opt.step()

    net.eval()
    with torch.no_grad():
        preds = net(test_x).reshape(-1).numpy()
    forecasts = np.maximum(scaler.inverse(preds), 0.0)
    result = ForecastResult(
        model_id=DERIVED_MODEL_ID,
        fold=fold.fold,
        items=test_items,
        actual=tuple(float(actuals[it]) for it in test_items),
        forecast=tuple(float(f) for f in forecasts),
        runtime_seconds=time.perf_counter() - start,
    )
    return net, result


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradient_check(
    fn: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    point: np.ndarray,
    eps: float = 1e-3,
) -> float:
    """Max relative error between ``grad`` and central differences of ``fn``."""
    if eps <= 0:
        raise InvalidEpsilon(f"eps must be > 0, got {eps}")
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(grad(point), dtype=np.float64)
    if analytic.shape != point.shape:
        raise ValueError("gradient shape must match the point")
    worst = 0.0
    flat = point.ravel()
    g = analytic.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = eps
        hi = float(fn((flat + bump).reshape(point.shape)))
        lo = float(fn((flat - bump).reshape(point.shape)))
        fd = (hi - lo) / (2.0 * eps)
        denom = max(abs(g[i]), abs(fd), 1e-8)
        worst = max(worst, abs(g[i] - fd) / denom)
    return worst
