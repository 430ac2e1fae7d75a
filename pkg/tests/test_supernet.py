import json
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from voxcast.errors import ShapeMismatch, UnsupportedStride
from voxcast.supernet import (
    N_OPS,
    OP_ORDER,
    ArchParams,
    Cell,
    DerivedNet,
    Genotype,
    MixedOp,
    OpKind,
    Supernet,
    SupernetConfig,
    build_primitive,
    derive_genotype,
    load_genotype,
    n_cell_edges,
    save_genotype,
)


def saturated_weights(index: int) -> torch.Tensor:
    """Logit pattern whose softmax underflows to an exact one-hot."""
    alpha = torch.zeros(N_OPS, dtype=torch.float64)
    alpha[index] = 800.0
    return torch.softmax(alpha, dim=0)


class TestPrimitives:
    @pytest.mark.parametrize("kind", OP_ORDER)
    @pytest.mark.parametrize("shape", [(2, 3, 4, 3, 2), (1, 2, 1, 5, 1), (2, 1, 3, 3, 3)])
    def test_stride1_preserves_shape(self, kind, shape):
        x = torch.randn(*shape, dtype=torch.float64)
        y = build_primitive(kind, shape[1], 1)(x)
        assert tuple(y.shape) == shape

    @pytest.mark.parametrize("kind", OP_ORDER)
    @pytest.mark.parametrize("shape", [(2, 3, 4, 3, 2), (1, 2, 1, 5, 1), (2, 2, 7, 2, 6)])
    def test_stride2_halves_ceiling(self, kind, shape):
        x = torch.randn(*shape, dtype=torch.float64)
        y = build_primitive(kind, shape[1], 2)(x)
        expected = tuple(math.ceil(d / 2) for d in shape[2:])
        assert tuple(y.shape) == (shape[0], shape[1], *expected)

    def test_unsupported_stride(self):
        with pytest.raises(UnsupportedStride):
            build_primitive(OpKind.CONV_3x3x3, 4, 3)

    def test_skip_is_identity(self):
        x = torch.randn(2, 3, 4, 3, 2, dtype=torch.float64)
        y = build_primitive(OpKind.SKIP_CONNECT, 3, 1)(x)
        assert torch.equal(y, x)

    def test_none_returns_zeros(self):
        x = torch.randn(2, 3, 4, 3, 2, dtype=torch.float64)
        for stride in (1, 2):
            y = build_primitive(OpKind.NONE, 3, stride)(x)
            assert torch.count_nonzero(y) == 0

    def test_avg_pool_keeps_constants(self):
        x = torch.full((1, 2, 3, 3, 3), -2.5, dtype=torch.float64)
        y = build_primitive(OpKind.AVG_POOL_3x3x3, 2, 1)(x)
        assert torch.allclose(y, x)

    def test_max_pool_ignores_padding(self):
        x = torch.full((1, 1, 3, 3, 3), -4.0, dtype=torch.float64)
        y = build_primitive(OpKind.MAX_POOL_3x3x3, 1, 1)(x)
        assert torch.equal(y, x)

    def test_anisotropic_kernels_span_expected_axes(self):
        # conv_1x3x3 never mixes along the feature axis; conv_3x1x1 only does
        for kind, mixing_axis in ((OpKind.CONV_1x3x3, (3, 4)), (OpKind.CONV_3x1x1, (2,))):
            op = build_primitive(kind, 1, 1)
            conv = [m for m in op.modules() if isinstance(m, nn.Conv3d)][0]
            k = conv.kernel_size
            spans = tuple(axis + 2 for axis, size in enumerate(k) if size > 1)
            assert spans == mixing_axis


class TestMixedOp:
    def test_skip_none_half_mix(self):
        op = MixedOp(3, stride=1)
        alpha = torch.zeros(N_OPS, dtype=torch.float64)
        alpha[OP_ORDER.index(OpKind.SKIP_CONNECT)] = 800.0
        alpha[OP_ORDER.index(OpKind.NONE)] = 800.0
        weights = torch.softmax(alpha, dim=0)
        x = torch.randn(2, 3, 4, 3, 2, dtype=torch.float64)
        y = op(x, weights)
        assert torch.allclose(y, 0.5 * x)

    def test_dominant_skip(self):
        op = MixedOp(3, stride=1).eval()
        alpha = torch.zeros(N_OPS, dtype=torch.float64)
        alpha[OP_ORDER.index(OpKind.SKIP_CONNECT)] = 20.0
        x = torch.randn(2, 3, 4, 3, 2, dtype=torch.float64)
        y = op(x, torch.softmax(alpha, dim=0))
        assert (y - x).abs().max() < 1e-6

    def test_output_shape_contract(self):
        for stride in (1, 2):
            op = MixedOp(2, stride=stride)
            x = torch.randn(1, 2, 5, 3, 2, dtype=torch.float64)
            y = op(x, torch.full((N_OPS,), 1.0 / N_OPS, dtype=torch.float64))
            reference = build_primitive(OpKind.NONE, 2, stride)(x)
            assert y.shape == reference.shape

    def test_bad_weight_length(self):
        op = MixedOp(2, stride=1)
        x = torch.randn(1, 2, 3, 3, 3, dtype=torch.float64)
        with pytest.raises(ShapeMismatch):
            op(x, torch.ones(3, dtype=torch.float64))


class TestCell:
    def test_forced_skip_doubles_input(self):
        cell = Cell(nodes=1, c_prev_prev=3, c_prev=3, channels=3,
                    reduction=False, reduction_prev=False)
        cell.preprocess0 = nn.Identity()
        cell.preprocess1 = nn.Identity()
        weights = torch.stack([saturated_weights(OP_ORDER.index(OpKind.SKIP_CONNECT))] * 2)
        x = torch.randn(2, 3, 4, 3, 2, dtype=torch.float64)
        y = cell(x, x, weights)
        assert torch.equal(y, 2 * x)

    def test_reduction_halves_spatial(self):
        cell = Cell(nodes=2, c_prev_prev=4, c_prev=4, channels=4,
                    reduction=True, reduction_prev=False)
        weights = torch.full((n_cell_edges(2), N_OPS), 1.0 / N_OPS, dtype=torch.float64)
        x = torch.randn(2, 4, 5, 3, 2, dtype=torch.float64)
        y = cell(x, x, weights)
        assert tuple(y.shape[2:]) == (3, 2, 1)

    def test_concat_channel_count(self):
        for nodes in (1, 2, 3):
            cell = Cell(nodes=nodes, c_prev_prev=4, c_prev=4, channels=4,
                        reduction=False, reduction_prev=False)
            weights = torch.full((n_cell_edges(nodes), N_OPS), 1.0 / N_OPS,
                                 dtype=torch.float64)
            x = torch.randn(1, 4, 3, 3, 3, dtype=torch.float64)
            y = cell(x, x, weights)
            assert y.shape[1] == nodes * 4


class TestSupernet:
    def test_batch_output_shape(self):
        net = Supernet(3, SupernetConfig(cells=2, nodes=1, width=4))
        x = torch.randn(7, 3, 4, 3, 2, dtype=torch.float64)
        assert net(x).shape == (7, 1)

    def test_zero_head_outputs_bias(self):
        net = Supernet(2, SupernetConfig(cells=2, nodes=1, width=4))
        with torch.no_grad():
            net.head.weight.zero_()
            net.head.bias.fill_(1.5)
        x = torch.randn(3, 2, 3, 3, 3, dtype=torch.float64)
        assert torch.allclose(net(x), torch.full((3, 1), 1.5, dtype=torch.float64))

    def test_finite_output(self):
        net = Supernet(3, SupernetConfig(cells=3, nodes=2, width=4))
        x = torch.randn(4, 3, 5, 3, 2, dtype=torch.float64)
        assert torch.isfinite(net(x)).all()

    def test_edge_softmax_sums_to_one(self):
        net = Supernet(2, SupernetConfig(cells=2, nodes=2, width=4), alpha_noise=0.3)
        w = torch.softmax(net.alphas_normal, dim=-1)
        assert (w.sum(dim=-1) - 1).abs().max() < 1e-12
        assert (w > 0).all()

    def test_wrong_channels_rejected(self):
        net = Supernet(3, SupernetConfig(cells=2, nodes=1, width=4))
        with pytest.raises(ShapeMismatch):
            net(torch.randn(1, 2, 3, 3, 3, dtype=torch.float64))

    def test_deterministic_given_seed(self):
        cfg = SupernetConfig(cells=2, nodes=1, width=4, seed=11)
        torch.manual_seed(0)
        net1 = Supernet(3, cfg)
        torch.manual_seed(0)
        net2 = Supernet(3, cfg)
        x = torch.randn(2, 3, 4, 3, 2, dtype=torch.float64)
        net1.eval(), net2.eval()
        assert torch.equal(net1(x), net2(x))

    def test_reduction_positions(self):
        cfg = SupernetConfig(cells=4, nodes=2, width=4)
        assert cfg.reduction_positions == (1, 2)
        net = Supernet(2, cfg)
        assert [c.reduction for c in net.cells] == [False, True, True, False]


class TestDeriveGenotype:
    def _params(self, nodes=2):
        edges = n_cell_edges(nodes)
        return np.zeros((edges, N_OPS)), np.zeros((edges, N_OPS))

    def test_hand_set_winners(self):
        normal, reduce = self._params(nodes=2)
        skip = OP_ORDER.index(OpKind.SKIP_CONNECT)
        conv3 = OP_ORDER.index(OpKind.CONV_3x3x3)
        # node 0: both edges kept; make edge1's op conv_3x3x3
        normal[0, skip] = 3.0
        normal[1, conv3] = 4.0
        # node 1: edges are rows 2,3,4; favour rows 3 and 4
        normal[3, conv3] = 5.0
        normal[4, skip] = 6.0
        geno = derive_genotype(ArchParams(normal=normal, reduce=reduce), nodes=2)
        assert geno.normal[0] == (("skip_connect", 0), ("conv_3x3x3", 1))
        assert geno.normal[1] == (("conv_3x3x3", 1), ("skip_connect", 2))

    def test_all_equal_ties_to_lowest_indices(self):
        normal, reduce = self._params(nodes=2)
        geno = derive_genotype(ArchParams(normal=normal, reduce=reduce), nodes=2)
        first_op = OP_ORDER[1].value  # lowest non-`none` op index
        for cell in (geno.normal, geno.reduce):
            assert cell[0] == ((first_op, 0), (first_op, 1))
            assert cell[1] == ((first_op, 0), (first_op, 1))

    def test_never_contains_none(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            normal = rng.normal(size=(n_cell_edges(2), N_OPS))
            reduce = rng.normal(size=(n_cell_edges(2), N_OPS))
            geno = derive_genotype(ArchParams(normal=normal, reduce=reduce), nodes=2)
            for cell in (geno.normal, geno.reduce):
                for node in cell:
                    assert len(node) == 2
                    for op, pred in node:
                        assert op != "none"

    def test_single_edge_shift_invariance(self):
        rng = np.random.default_rng(4)
        normal = rng.normal(size=(n_cell_edges(2), N_OPS))
        reduce = rng.normal(size=(n_cell_edges(2), N_OPS))
        base = derive_genotype(ArchParams(normal=normal, reduce=reduce), nodes=2)
        for row in range(normal.shape[0]):
            shifted = normal.copy()
            shifted[row] += 11.0
            again = derive_genotype(ArchParams(normal=shifted, reduce=reduce), nodes=2)
            assert again == base

    def test_validation_rejects_none(self):
        geno = Genotype(
            normal=((("none", 0), ("skip_connect", 1)),),
            reduce=((("skip_connect", 0), ("skip_connect", 1)),),
        )
        with pytest.raises(ValueError):
            geno.validate()


class TestGenotypeFiles:
    def test_roundtrip(self, tmp_path):
        normal, reduce = np.zeros((5, N_OPS)), np.zeros((5, N_OPS))
        geno = derive_genotype(
            ArchParams(normal=normal, reduce=reduce), nodes=2,
            embedding={"mode": "factorized", "orders": {"feature": [0]},
                       "clusterings": {}},
        )
        path = tmp_path / "genotype.json"
        save_genotype(geno, path, meta={"seed": 1})
        again = load_genotype(path)
        assert again == geno
        payload = json.loads(path.read_text())
        assert payload["seed"] == 1


class TestDerivedNet:
    def _genotype(self):
        return Genotype(
            normal=(
                (("skip_connect", 0), ("conv_3x3x3", 1)),
                (("sep_conv_3x3x3", 2), ("max_pool_3x3x3", 0)),
            ),
            reduce=(
                (("conv_1x3x3", 0), ("conv_3x1x1", 1)),
                (("dil_conv_3x3x3", 1), ("skip_connect", 2)),
            ),
        )

    def test_forward_shape(self):
        net = DerivedNet(3, SupernetConfig(cells=4, nodes=2, width=4), self._genotype())
        x = torch.randn(5, 3, 6, 4, 3, dtype=torch.float64)
        assert net(x).shape == (5, 1)

    def test_deterministic(self):
        cfg = SupernetConfig(cells=2, nodes=2, width=4)
        torch.manual_seed(7)
        n1 = DerivedNet(2, cfg, self._genotype())
        torch.manual_seed(7)
        n2 = DerivedNet(2, cfg, self._genotype())
        x = torch.randn(2, 2, 4, 3, 2, dtype=torch.float64)
        n1.eval(), n2.eval()
        assert torch.equal(n1(x), n2(x))


class TestGradients:
    def test_arch_alpha_matches_finite_differences(self):
        from voxcast.search import gradient_check

        torch.manual_seed(3)
        cell = Cell(nodes=1, c_prev_prev=3, c_prev=3, channels=3,
                    reduction=False, reduction_prev=False).eval()
        x = torch.randn(2, 3, 4, 3, 2, dtype=torch.float64)
        probe = torch.randn(2, 3, 4, 3, 2, dtype=torch.float64)
        shape = (2, N_OPS)

        def forward(alpha_t):
            weights = torch.softmax(alpha_t, dim=-1)
            return (cell(x, x, weights) * probe).sum()

        def fn(a):
            with torch.no_grad():
                return float(forward(torch.as_tensor(a)))

        def grad(a):
            alpha_t = torch.tensor(a, requires_grad=True)
            forward(alpha_t).backward()
            return alpha_t.grad.numpy()

        point = 0.1 * np.random.default_rng(0).normal(size=shape)
        assert gradient_check(fn, grad, point, eps=1e-3) < 1e-4
