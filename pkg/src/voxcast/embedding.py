"""Arranging panel features into voxel images, and the search over arrangements.

An item's records form a dense grid with axes (year, feature, base,
equipment); the year acts as the image channel and the other three axes are
spatial.  Members of each spatial axis are grouped into clusters, and the
searchable arrangement is the order of the cluster blocks along the axis
(members stay in canonical order inside their block).  A candidate mapping is
one cluster-order choice per axis; the differentiable relaxation mixes all
candidates with softmax weights.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from .errors import EmptyAxis, IncompleteGrid, ShapeMismatch, SpaceTooLarge
from .panel import DemandPanel

AXES = ("feature", "base", "equipment")
DEFAULT_MAX_CLUSTERS = {"feature": 5, "base": 4, "equipment": 3}
DEFAULT_JOINT_CAP = 2000


@dataclass(frozen=True)
class LevelClustering:
    """Partition of one axis into ordered cluster blocks.

    ``members`` follows the panel's canonical axis order and ``clusters``
    holds member positions per block, ascending, with blocks ordered by their
    smallest member.
    """

    axis: str
    members: tuple[str, ...]
    clusters: tuple[tuple[int, ...], ...]

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def assignment(self) -> dict[str, int]:
        out = {}
        for cid, block in enumerate(self.clusters):
            for pos in block:
                out[self.members[pos]] = cid
        return out

    def member_permutation(self, order: Sequence[int]) -> np.ndarray:
        """Member-position permutation realizing a cluster-block order."""
        if sorted(order) != list(range(self.n_clusters)):
            raise ShapeMismatch(f"order {order} is not a permutation of {self.n_clusters} clusters")
        return np.concatenate([np.array(self.clusters[c], dtype=np.int64) for c in order])

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "members": list(self.members),
            "clusters": [list(block) for block in self.clusters],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "LevelClustering":
        return cls(
            axis=payload["axis"],
            members=tuple(payload["members"]),
            clusters=tuple(tuple(int(i) for i in block) for block in payload["clusters"]),
        )


def cluster_levels(
    panel: DemandPanel,
    axis: str,
    max_clusters: int,
    seed: int = 0,
) -> LevelClustering:
    """Cluster one axis on mean profiles; pick the count by silhouette.

    Feature members are profiled by their mean value per (base, equipment)
    cell; bases and equipment by their mean feature vector.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    if max_clusters < 1:
        raise ValueError("max_clusters must be >= 1")
    dense = panel.dense_values  # (items, years, features, bases, equipment)
    if axis == "feature":
        members = panel.schema.feature_ids
        profiles = np.nanmean(dense, axis=(0, 1)).reshape(len(members), -1)
    elif axis == "base":
        members = panel.bases
        profiles = np.nanmean(dense, axis=(0, 1, 4)).T
    else:
        members = panel.equipment
        profiles = np.nanmean(dense, axis=(0, 1, 3)).T
    n = len(members)
    if n == 0:
        raise EmptyAxis(f"axis {axis!r} has no members")
    profiles = np.nan_to_num(profiles, nan=0.0)

    labels = _choose_clustering(profiles, max_clusters, seed)
    blocks: dict[int, list[int]] = {}
    for pos, lab in enumerate(labels):
        blocks.setdefault(int(lab), []).append(pos)
    ordered = sorted(blocks.values(), key=lambda b: b[0])
    return LevelClustering(
        axis=axis,
        members=tuple(members),
        clusters=tuple(tuple(b) for b in ordered),
    )


def _choose_clustering(profiles: np.ndarray, max_clusters: int, seed: int) -> np.ndarray:
    n = profiles.shape[0]
    if max_clusters == 1 or n == 1:
        return np.zeros(n, dtype=int)
    candidates = list(range(2, min(max_clusters, n) + 1))
    scored = []
    for k in candidates:
        km = KMeans(n_clusters=k, n_init=10, random_state=seed)
        labels = km.fit_predict(profiles)
        if k <= n - 1 and len(set(labels)) > 1:
            try:
                score = float(silhouette_score(profiles, labels))
            except ValueError:
                score = -np.inf
        else:
            score = -np.inf
        scored.append((score, -k, labels))
    best = max(scored, key=lambda t: (t[0], t[1]))
    if math.isinf(best[0]) and best[0] < 0:
        return scored[0][2]
    return best[2]


# ---------------------------------------------------------------------------
# candidate mapping spaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CandidateMappingSpace:
    """All cluster-order choices for the three spatial axes."""

    mode: str  # "joint" | "factorized"
    clusterings: tuple[LevelClustering, LevelClustering, LevelClustering]
    axis_perms: tuple[tuple[tuple[int, ...], ...], ...]

    @property
    def axis_sizes(self) -> tuple[int, int, int]:
        return tuple(len(p) for p in self.axis_perms)

    @property
    def joint_size(self) -> int:
        return int(np.prod([math.factorial(c.n_clusters) for c in self.clusterings]))

    @property
    def param_count(self) -> int:
        return self.joint_size if self.mode == "joint" else sum(self.axis_sizes)

    @property
    def param_shapes(self) -> tuple[int, ...]:
        return (self.joint_size,) if self.mode == "joint" else self.axis_sizes

    def decode_joint(self, index: int) -> tuple[tuple[int, ...], ...]:
        """Joint candidate index -> one cluster order per axis (lexicographic)."""
        sf, sb, se = self.axis_sizes
        i_f, rem = divmod(index, sb * se)
        i_b, i_e = divmod(rem, se)
        return (self.axis_perms[0][i_f], self.axis_perms[1][i_b], self.axis_perms[2][i_e])


def enumerate_candidates(
    clusterings: Sequence[LevelClustering],
    mode: str = "factorized",
    cap: int = DEFAULT_JOINT_CAP,
) -> CandidateMappingSpace:
    if len(clusterings) != 3:
        raise ValueError("need one clustering per spatial axis")
    if mode not in ("joint", "factorized"):
        raise ValueError("mode must be 'joint' or 'factorized'")
    joint_size = int(np.prod([math.factorial(c.n_clusters) for c in clusterings]))
    if mode == "joint" and joint_size > cap:
        raise SpaceTooLarge(f"joint space of {joint_size} candidates exceeds cap {cap}")
    axis_perms = tuple(
        tuple(itertools.permutations(range(c.n_clusters))) for c in clusterings
    )
    return CandidateMappingSpace(mode=mode, clusterings=tuple(clusterings), axis_perms=axis_perms)


@dataclass
class EmbeddingParams:
    """Architecture logits over candidate mappings (one vector per axis, or one joint)."""

    mode: str
    vectors: tuple[np.ndarray, ...]

    def __post_init__(self):
        for v in self.vectors:
            if not np.all(np.isfinite(v)):
                raise ValueError("embedding parameters must be finite")

    @classmethod
    def uniform(cls, space: CandidateMappingSpace, noise: float = 0.0, seed: int = 0) -> "EmbeddingParams":
        rng = np.random.default_rng(seed)
        vectors = []
        for size in space.param_shapes:
            v = np.zeros(size, dtype=np.float64)
            if noise > 0:
                v += noise * rng.standard_normal(size)
            vectors.append(v)
        return cls(mode=space.mode, vectors=tuple(vectors))


# ---------------------------------------------------------------------------
# voxel rendering
# ---------------------------------------------------------------------------

def _check_grid(grid: np.ndarray, clusterings: Sequence[LevelClustering]) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim not in (4, 5):
        raise ShapeMismatch("grid must be (years, features, bases, equipment) or batched")
    spatial = grid.shape[-3:]
    expected = tuple(len(c.members) for c in clusterings)
    if spatial != expected:
        raise ShapeMismatch(f"grid spatial shape {spatial} != axis sizes {expected}")
    if not np.all(np.isfinite(grid)):
        raise IncompleteGrid("grid contains missing cells")
    return grid


def voxelize(
    grid: np.ndarray,
    clusterings: Sequence[LevelClustering],
    orders: Sequence[Sequence[int]],
) -> np.ndarray:
    """Arrange a dense item grid into a voxel image under given cluster orders.

    Accepts a single (years, features, bases, equipment) grid or a batch with
    a leading sample axis; every tabular value lands in exactly one cell.
    """
    grid = _check_grid(grid, clusterings)
    perms = [c.member_permutation(o) for c, o in zip(clusterings, orders)]
    off = grid.ndim - 3
    out = grid
    for d, perm in enumerate(perms):
        out = np.take(out, perm, axis=off + d)
    return out


def mixed_embed(
    grid,
    space: CandidateMappingSpace,
    params,
) -> torch.Tensor:
    """Softmax-weighted mixture of all candidate voxel images.

    Factorized mode mixes the three per-axis arrangements in sequence
    (feature, then base, then equipment); joint mode mixes full triples.
    Differentiable with respect to the logits.
    """
    alphas = _as_alpha_tensors(params, space)
    if isinstance(grid, torch.Tensor):
        x = grid.to(torch.float64)
        _check_grid(grid.detach().numpy(), space.clusterings)
    else:
        x = torch.from_numpy(_check_grid(grid, space.clusterings))
    off = x.dim() - 3

    if space.mode == "factorized":
        out = x
        for d in range(3):
            w = _softmax(alphas[d])
            perms = [
                torch.from_numpy(space.clusterings[d].member_permutation(o))
                for o in space.axis_perms[d]
            ]
            out = sum(w[p] * out.index_select(off + d, perms[p]) for p in range(len(perms)))
        return out

    w = _softmax(alphas[0])
    out = None
    for c in range(space.joint_size):
        orders = space.decode_joint(c)
        term = x
        for d in range(3):
            perm = torch.from_numpy(space.clusterings[d].member_permutation(orders[d]))
            term = term.index_select(off + d, perm)
        term = w[c] * term
        out = term if out is None else out + term
    return out


def _softmax(alpha: torch.Tensor) -> torch.Tensor:
    z = alpha - alpha.max()
    e = torch.exp(z)
    return e / e.sum()


def _as_alpha_tensors(params, space: CandidateMappingSpace) -> list[torch.Tensor]:
    if isinstance(params, EmbeddingParams):
        if params.mode != space.mode:
            raise ShapeMismatch("params mode differs from space mode")
        vectors = params.vectors
    elif isinstance(params, (list, tuple)):
        vectors = params
    else:
        vectors = (params,)
    shapes = space.param_shapes
    if len(vectors) != len(shapes):
        raise ShapeMismatch(f"expected {len(shapes)} logit vectors, got {len(vectors)}")
    out = []
    for v, size in zip(vectors, shapes):
        t = v if isinstance(v, torch.Tensor) else torch.as_tensor(np.asarray(v, dtype=np.float64))
        t = t.to(torch.float64)
        if t.numel() != size:
            raise ShapeMismatch(f"logit vector of length {t.numel()} != candidate count {size}")
        out.append(t)
    return out


def derive_embedding(space: CandidateMappingSpace, params) -> tuple[tuple[int, ...], ...]:
    """Pick the highest-logit candidate (ties break to the lowest index)."""
    alphas = [t.detach().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
              for t in _as_alpha_tensors(params, space)]
    if space.mode == "joint":
        return space.decode_joint(int(np.argmax(alphas[0])))
    return tuple(space.axis_perms[d][int(np.argmax(alphas[d]))] for d in range(3))


# ---------------------------------------------------------------------------
# labeled voxels and serialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoxelImage:
    """One sample's voxel with the axis labels that produced it."""

    values: np.ndarray  # (years, features, bases, equipment)
    years: tuple[int, ...]
    feature_order: tuple[str, ...]
    base_order: tuple[str, ...]
    equipment_order: tuple[str, ...]


def render_voxel(
    panel: DemandPanel,
    item: str,
    clusterings: Sequence[LevelClustering],
    orders: Sequence[Sequence[int]],
) -> VoxelImage:
    grid = panel.item_grid(item)
    values = voxelize(grid, clusterings, orders)
    labels = []
    for c, o in zip(clusterings, orders):
        perm = c.member_permutation(o)
        labels.append(tuple(c.members[i] for i in perm))
    return VoxelImage(
        values=values,
        years=panel.years,
        feature_order=labels[0],
        base_order=labels[1],
        equipment_order=labels[2],
    )


def save_embedding(
    clusterings: Sequence[LevelClustering],
    orders: Sequence[Sequence[int]],
    path,
) -> None:
    payload = {
        "clusterings": {c.axis: c.to_dict() for c in clusterings},
        "orders": {c.axis: list(o) for c, o in zip(clusterings, orders)},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_embedding(path) -> tuple[tuple[LevelClustering, ...], tuple[tuple[int, ...], ...]]:
    with open(path) as fh:
        payload = json.load(fh)
    clusterings = tuple(
        LevelClustering.from_dict(payload["clusterings"][axis]) for axis in AXES
    )
    orders = tuple(tuple(int(i) for i in payload["orders"][axis]) for axis in AXES)
    return clusterings, orders
