"""3D convolutional supernet over voxel inputs, and its discrete derivation.

Every primitive maps (N, C, F, B, E) to the same channel count; at stride 1
it preserves the spatial shape, at stride 2 it halves each spatial axis with
ceiling division.  Cells are DAGs with two input nodes and N intermediate
nodes whose edges carry softmax mixtures over the primitive set; the network
ends in global average pooling and a single-output affine head for demand
regression.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch, UnsupportedStride


class OpKind(Enum):
    NONE = "none"
    AVG_POOL_3x3x3 = "avg_pool_3x3x3"
    MAX_POOL_3x3x3 = "max_pool_3x3x3"
    SKIP_CONNECT = "skip_connect"
    CONV_1x1x1 = "conv_1x1x1"
    CONV_3x3x3 = "conv_3x3x3"
    CONV_5x5x5 = "conv_5x5x5"
    SEP_CONV_3x3x3 = "sep_conv_3x3x3"
    DIL_CONV_3x3x3 = "dil_conv_3x3x3"
    CONV_1x3x3 = "conv_1x3x3"
    CONV_3x1x1 = "conv_3x1x1"


OP_ORDER: tuple[OpKind, ...] = tuple(OpKind)
N_OPS = len(OP_ORDER)
_DTYPE = torch.float64


class Zero(nn.Module):
    """The `none` edge: zeros of the stride-consistent output shape."""

    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        if self.stride == 1:
            return x * 0.0
        s = self.stride
        return x[:, :, ::s, ::s, ::s] * 0.0


class AvgPool3dSame(nn.Module):
    """3x3x3 average pool; padding excluded from the average.

    Pads explicitly so axes of any extent (including 1) are supported.
    """

    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        padded = F.pad(x, (1,) * 6)
        sums = F.avg_pool3d(padded, 3, stride=self.stride) * 27.0
        ones = torch.ones_like(x)
        counts = F.avg_pool3d(F.pad(ones, (1,) * 6), 3, stride=self.stride) * 27.0
        return sums / counts


class MaxPool3dSame(nn.Module):
    """3x3x3 max pool with explicit minus-infinity padding."""

    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        padded = F.pad(x, (1,) * 6, value=float("-inf"))
        return F.max_pool3d(padded, 3, stride=self.stride)


class ReduceSkip(nn.Module):
    """Skip connection at stride 2 (1x1x1 strided projection)."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.act = nn.ReLU()
        self.conv = nn.Conv3d(c_in, c_out, 1, stride=2, bias=False)
        self.bn = nn.BatchNorm3d(c_out)

    def forward(self, x):
        return self.bn(self.conv(self.act(x)))


class ReLUConvBN(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, dilation=1):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReLU(),
            nn.Conv3d(c_in, c_out, kernel, stride=stride, padding=padding,
                      dilation=dilation, bias=False),
            nn.BatchNorm3d(c_out),
        )

    def forward(self, x):
        return self.block(x)


class SepConv(nn.Module):
    """Depthwise-then-pointwise convolution, applied twice."""

    def __init__(self, channels, kernel, stride, padding):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReLU(),
            nn.Conv3d(channels, channels, kernel, stride=stride, padding=padding,
                      groups=channels, bias=False),
            nn.Conv3d(channels, channels, 1, bias=False),
            nn.BatchNorm3d(channels),
            nn.ReLU(),
            nn.Conv3d(channels, channels, kernel, stride=1, padding=padding,
                      groups=channels, bias=False),
            nn.Conv3d(channels, channels, 1, bias=False),
            nn.BatchNorm3d(channels),
        )

    def forward(self, x):
        return self.block(x)


class DilConv(nn.Module):
    def __init__(self, channels, kernel, stride, padding, dilation):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReLU(),
            nn.Conv3d(channels, channels, kernel, stride=stride, padding=padding,
                      dilation=dilation, groups=channels, bias=False),
            nn.Conv3d(channels, channels, 1, bias=False),
            nn.BatchNorm3d(channels),
        )

    def forward(self, x):
        return self.block(x)


def build_primitive(kind: OpKind, channels: int, stride: int) -> nn.Module:
    """Instantiate one search-space operation with the shared shape contract."""
    kind = OpKind(kind)
    if stride not in (1, 2):
        raise UnsupportedStride(f"stride must be 1 or 2, got {stride}")
    if kind is OpKind.NONE:
        mod = Zero(stride)
    elif kind is OpKind.AVG_POOL_3x3x3:
        mod = AvgPool3dSame(stride)
    elif kind is OpKind.MAX_POOL_3x3x3:
        mod = MaxPool3dSame(stride)
    elif kind is OpKind.SKIP_CONNECT:
        mod = nn.Identity() if stride == 1 else ReduceSkip(channels, channels)
    elif kind is OpKind.CONV_1x1x1:
        mod = ReLUConvBN(channels, channels, 1, stride=stride)
    elif kind is OpKind.CONV_3x3x3:
        mod = ReLUConvBN(channels, channels, 3, stride=stride, padding=1)
    elif kind is OpKind.CONV_5x5x5:
        mod = ReLUConvBN(channels, channels, 5, stride=stride, padding=2)
    elif kind is OpKind.SEP_CONV_3x3x3:
        mod = SepConv(channels, 3, stride, 1)
    elif kind is OpKind.DIL_CONV_3x3x3:
        mod = DilConv(channels, 3, stride, padding=2, dilation=2)
    elif kind is OpKind.CONV_1x3x3:
        # spans (base, equipment) only
        mod = ReLUConvBN(channels, channels, (1, 3, 3), stride=stride, padding=(0, 1, 1))
    elif kind is OpKind.CONV_3x1x1:
        # spans the feature axis only
        mod = ReLUConvBN(channels, channels, (3, 1, 1), stride=stride, padding=(1, 0, 0))
    else:  # pragma: no cover - enum is closed
        raise ValueError(kind)
    return mod.to(_DTYPE)


class MixedOp(nn.Module):
    """Softmax-weighted sum of every primitive on one edge."""

    def __init__(self, channels: int, stride: int):
        super().__init__()
        self.ops = nn.ModuleList(build_primitive(k, channels, stride) for k in OP_ORDER)

    def forward(self, x, weights):
        if weights.numel() != N_OPS:
            raise ShapeMismatch(f"edge weights must have {N_OPS} entries")
        return sum(w * op(x) for w, op in zip(weights, self.ops))


class Cell(nn.Module):
    """DAG cell: two inputs, ``nodes`` intermediate sums, channel-concat output."""

    def __init__(self, nodes, c_prev_prev, c_prev, channels, reduction, reduction_prev):
        super().__init__()
        self.nodes = nodes
        self.reduction = reduction
        if reduction_prev:
            self.preprocess0 = ReduceSkip(c_prev_prev, channels).to(_DTYPE)
        else:
            self.preprocess0 = ReLUConvBN(c_prev_prev, channels, 1).to(_DTYPE)
        self.preprocess1 = ReLUConvBN(c_prev, channels, 1).to(_DTYPE)
        self.ops = nn.ModuleList()
        for j in range(nodes):
            for i in range(2 + j):
                stride = 2 if reduction and i < 2 else 1
                self.ops.append(MixedOp(channels, stride))

    def forward(self, s0, s1, weights):
        s0 = self.preprocess0(s0)
        s1 = self.preprocess1(s1)
        states = [s0, s1]
        offset = 0
        for j in range(self.nodes):
            h = sum(
                self.ops[offset + i](states[i], weights[offset + i])
                for i in range(len(states))
            )
            offset += len(states)
            states.append(h)
        return torch.cat(states[2:], dim=1)


def n_cell_edges(nodes: int) -> int:
    return sum(2 + j for j in range(nodes))


@dataclass(frozen=True)
class SupernetConfig:
    cells: int = 4
    nodes: int = 2
    width: int = 8
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.cells < 2:
            raise ValueError("need at least 2 cells")
        if self.nodes < 1:
            raise ValueError("need at least 1 intermediate node")
        if self.width < 1:
            raise ValueError("width must be >= 1")

    @property
    def reduction_positions(self) -> tuple[int, int]:
        return (self.cells // 3, 2 * self.cells // 3)


class Supernet(nn.Module):
    """Stem, stacked mixed cells, global pooling, single-output head."""

    def __init__(self, in_channels: int, config: SupernetConfig, alpha_noise: float = 0.0):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        width = config.width
        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm3d(width),
        ).to(_DTYPE)

        c_prev_prev, c_prev, c_curr = width, width, width
        reduction_prev = False
        self.cells = nn.ModuleList()
        for i in range(config.cells):
            reduction = i in config.reduction_positions
            if reduction:
                c_curr *= 2
            cell = Cell(config.nodes, c_prev_prev, c_prev, c_curr, reduction, reduction_prev)
            self.cells.append(cell)
            reduction_prev = reduction
            c_prev_prev, c_prev = c_prev, config.nodes * c_curr

        self.global_pool = nn.AdaptiveAvgPool3d(1)
        self.head = nn.Linear(c_prev, 1).to(_DTYPE)

        edges = n_cell_edges(config.nodes)
        gen = torch.Generator().manual_seed(config.seed)
        init = lambda: alpha_noise * torch.randn(edges, N_OPS, generator=gen, dtype=_DTYPE)
        self.alphas_normal = nn.Parameter(init())
        self.alphas_reduce = nn.Parameter(init())

    def arch_parameters(self) -> list[nn.Parameter]:
        return [self.alphas_normal, self.alphas_reduce]

    def weight_parameters(self) -> list[nn.Parameter]:
        arch = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5:
            raise ShapeMismatch("expected a (batch, years, features, bases, equipment) tensor")
        if x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"expected {self.in_channels} year channels, got {x.shape[1]}"
            )
        x = x.to(_DTYPE)
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            alphas = self.alphas_reduce if cell.reduction else self.alphas_normal
            weights = torch.softmax(alphas, dim=-1)
            s0, s1 = s1, cell(s0, s1, weights)
        out = self.global_pool(s1).flatten(1)
        return self.head(out)

    def arch_params(self) -> "ArchParams":
        return ArchParams(
            normal=self.alphas_normal.detach().numpy().copy(),
            reduce=self.alphas_reduce.detach().numpy().copy(),
        )


# ---------------------------------------------------------------------------
# genotypes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchParams:
    """Edge logits over the op set for the two cell types."""

    normal: np.ndarray
    reduce: np.ndarray

    def __post_init__(self):
        for name in ("normal", "reduce"):
            mat = getattr(self, name)
            if mat.ndim != 2 or mat.shape[1] != N_OPS:
                raise ShapeMismatch(f"{name} logits must be (edges, {N_OPS})")
            if not np.all(np.isfinite(mat)):
                raise ValueError("architecture logits must be finite")


NodeSpec = tuple[tuple[str, int], tuple[str, int]]  # ((op, pred), (op, pred))


@dataclass(frozen=True)
class Genotype:
    """Discrete architecture: kept edges/ops per node plus embedding orders."""

    normal: tuple[NodeSpec, ...]
    reduce: tuple[NodeSpec, ...]
    embedding: dict | None = None

    def validate(self) -> None:
        for name, cell in (("normal", self.normal), ("reduce", self.reduce)):
            for j, node in enumerate(cell):
                if len(node) != 2:
                    raise ValueError(f"{name} node {j} must keep exactly 2 inputs")
                for op, pred in node:
                    if op == OpKind.NONE.value:
                        raise ValueError("derived genotype may not contain `none`")
                    OpKind(op)
                    if not 0 <= pred < 2 + j:
                        raise ValueError(f"{name} node {j} input {pred} is not earlier")

    def to_dict(self) -> dict:
        payload = {
            "normal": [[list(pair) for pair in node] for node in self.normal],
            "reduce": [[list(pair) for pair in node] for node in self.reduce],
        }
        if self.embedding is not None:
            payload["embedding"] = self.embedding
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "Genotype":
        def parse(cell):
            return tuple(
                tuple((str(op), int(pred)) for op, pred in node) for node in cell
            )

        return cls(
            normal=parse(payload["normal"]),
            reduce=parse(payload["reduce"]),
            embedding=payload.get("embedding"),
        )


def _softmax_rows(mat: np.ndarray) -> np.ndarray:
    z = mat - mat.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _derive_cell(logits: np.ndarray, nodes: int) -> tuple[NodeSpec, ...]:
    weights = _softmax_rows(logits)
    none_idx = OP_ORDER.index(OpKind.NONE)
    out = []
    offset = 0
    for j in range(nodes):
        n_in = 2 + j
        edge_w = []
        for i in range(n_in):
            row = np.delete(weights[offset + i], none_idx)
            edge_w.append(float(row.max()))
        ranked = sorted(range(n_in), key=lambda i: (-edge_w[i], i))
        chosen = sorted(ranked[:2])
        node = []
        for i in chosen:
            row = weights[offset + i].copy()
            row[none_idx] = -np.inf
            op = OP_ORDER[int(np.argmax(row))]
            node.append((op.value, i))
        out.append(tuple(node))
        offset += n_in
    return tuple(out)


def derive_genotype(arch: ArchParams, nodes: int, embedding: dict | None = None) -> Genotype:
    """Keep each node's two strongest non-`none` edges and their best ops.

    Edge strength is the largest non-`none` softmax weight; ties break to the
    lowest edge then op index.
    """
    geno = Genotype(
        normal=_derive_cell(arch.normal, nodes),
        reduce=_derive_cell(arch.reduce, nodes),
        embedding=embedding,
    )
    geno.validate()
    return geno


def save_genotype(genotype: Genotype, path, meta: dict | None = None) -> None:
    payload = genotype.to_dict()
    if meta:
        payload.update(meta)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_genotype(path) -> Genotype:
    with open(path) as fh:
        return Genotype.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# derived (discrete) network
# ---------------------------------------------------------------------------

class DerivedCell(nn.Module):
    def __init__(self, spec: Sequence[NodeSpec], c_prev_prev, c_prev, channels,
                 reduction, reduction_prev):
        super().__init__()
        self.spec = tuple(spec)
        self.reduction = reduction
        if reduction_prev:
            self.preprocess0 = ReduceSkip(c_prev_prev, channels).to(_DTYPE)
        else:
            self.preprocess0 = ReLUConvBN(c_prev_prev, channels, 1).to(_DTYPE)
        self.preprocess1 = ReLUConvBN(c_prev, channels, 1).to(_DTYPE)
        self.ops = nn.ModuleList()
        for node in self.spec:
            for op, pred in node:
                stride = 2 if reduction and pred < 2 else 1
                self.ops.append(build_primitive(OpKind(op), channels, stride))

    def forward(self, s0, s1):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        k = 0
        for node in self.spec:
            h = None
            for _, pred in node:
                term = self.ops[k](states[pred])
                h = term if h is None else h + term
                k += 1
            states.append(h)
        return torch.cat(states[2:], dim=1)


class DerivedNet(nn.Module):
    """The discrete network: one op per kept edge, fixed voxel orders."""

    def __init__(self, in_channels: int, config: SupernetConfig, genotype: Genotype):
        super().__init__()
        genotype.validate()
        self.config = config
        self.in_channels = in_channels
        width = config.width
        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm3d(width),
        ).to(_DTYPE)
        c_prev_prev, c_prev, c_curr = width, width, width
        reduction_prev = False
        self.cells = nn.ModuleList()
        for i in range(config.cells):
            reduction = i in config.reduction_positions
            if reduction:
                c_curr *= 2
            spec = genotype.reduce if reduction else genotype.normal
            cell = DerivedCell(spec, c_prev_prev, c_prev, c_curr, reduction, reduction_prev)
            self.cells.append(cell)
            reduction_prev = reduction
            c_prev_prev, c_prev = c_prev, config.nodes * c_curr
        self.global_pool = nn.AdaptiveAvgPool3d(1)
        self.head = nn.Linear(c_prev, 1).to(_DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != self.in_channels:
            raise ShapeMismatch("input does not match the derived network stem")
        x = x.to(_DTYPE)
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return self.head(self.global_pool(s1).flatten(1))
