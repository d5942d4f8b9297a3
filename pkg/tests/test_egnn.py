import math

import numpy as np
import pytest
import torch

from molsteer.egnn import Egnn, EgnnConfig, EgnnLayer, gradient_check, project_zero_cog
from molsteer.geometry import random_rotation


def _silu(x: float) -> float:
    return x / (1.0 + math.exp(-x))


def _hand_layer() -> EgnnLayer:
    """A 1-wide layer with every weight pinned so outputs are hand-computable.

    Messages are the constant silu(1); the coordinate scalar is silu(1)
    independent of the message; the feature update is silu(aggregate).
    """
    config = EgnnConfig(num_layers=1, hidden_dim=1, use_attention=False, message_mlp_depth=1)
    layer = EgnnLayer(config).double()
    with torch.no_grad():
        layer.edge_mlp[0].weight.zero_()
        layer.edge_mlp[0].bias.fill_(1.0)
        layer.coord_mlp[0].weight.zero_()
        layer.coord_mlp[0].bias.fill_(1.0)
        layer.coord_mlp[2].weight.fill_(1.0)
        layer.node_mlp[0].weight.copy_(torch.tensor([[0.0, 1.0]]))
        layer.node_mlp[0].bias.zero_()
        layer.node_mlp[2].weight.fill_(1.0)
        layer.node_mlp[2].bias.zero_()
    return layer


class TestHandCase:
    def test_two_node_coordinate_update(self):
        layer = _hand_layer()
        coords = torch.tensor([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], dtype=torch.float64)
        feats = torch.zeros(2, 1, dtype=torch.float64)
        out_coords, out_feats = layer(coords, feats)
        # Node 0 moves along (x0 - x1)/(dist + 1) = (-2/3, 0, 0), scaled by
        # the pinned coordinate scalar silu(1); node 1 mirrors it.
        shift = (2.0 / 3.0) * _silu(1.0)
        expected = torch.tensor(
            [[-shift, 0.0, 0.0], [2.0 + shift, 0.0, 0.0]], dtype=torch.float64
        )
        assert (out_coords - expected).abs().max() < 1e-9

    def test_two_node_feature_update(self):
        layer = _hand_layer()
        coords = torch.tensor([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], dtype=torch.float64)
        feats = torch.zeros(2, 1, dtype=torch.float64)
        _, out_feats = layer(coords, feats)
        # Each node aggregates exactly one off-diagonal message silu(1); the
        # self edge must be masked out or this doubles.
        expected = _silu(_silu(1.0))
        assert (out_feats - expected).abs().max() < 1e-12


def _random_net(layers: int, seed: int, in_dim: int = 4, out_dim: int = 2) -> Egnn:
    torch.manual_seed(seed)
    config = EgnnConfig(num_layers=layers, hidden_dim=24, message_mlp_depth=2)
    return Egnn(config, in_dim=in_dim, out_dim=out_dim).double()


class TestEquivariance:
    @pytest.mark.parametrize("layers", [1, 4, 9])
    def test_rotation_translation(self, layers, rng):
        net = _random_net(layers, seed=layers)
        coords = torch.as_tensor(rng.standard_normal((6, 3)))
        feats = torch.as_tensor(rng.standard_normal((6, 4)))
        base_coords, base_feats = net(coords, feats)
        for _ in range(10):
            r = torch.as_tensor(random_rotation(rng))
            shift = torch.as_tensor(rng.standard_normal(3))
            out_coords, out_feats = net(coords @ r.T + shift, feats)
            assert (out_coords - (base_coords @ r.T + shift)).abs().max() < 1e-10
            assert (out_feats - base_feats).abs().max() < 1e-10

    def test_permutation(self, rng):
        net = _random_net(3, seed=7)
        coords = torch.as_tensor(rng.standard_normal((5, 3)))
        feats = torch.as_tensor(rng.standard_normal((5, 4)))
        base_coords, base_feats = net(coords, feats)
        perm = torch.as_tensor(rng.permutation(5))
        out_coords, out_feats = net(coords[perm], feats[perm])
        assert (out_coords - base_coords[perm]).abs().max() < 1e-10
        assert (out_feats - base_feats[perm]).abs().max() < 1e-10

    def test_batch_dim_matches_loop(self, rng):
        net = _random_net(2, seed=11)
        coords = torch.as_tensor(rng.standard_normal((3, 5, 3)))
        feats = torch.as_tensor(rng.standard_normal((3, 5, 4)))
        batched_coords, batched_feats = net(coords, feats)
        for b in range(3):
            single_coords, single_feats = net(coords[b], feats[b])
            assert (batched_coords[b] - single_coords).abs().max() < 1e-12
            assert (batched_feats[b] - single_feats).abs().max() < 1e-12


class TestStructure:
    def test_fresh_net_keeps_coordinates(self, rng):
        # The last linear layer of every coordinate head starts at zero, so an
        # untrained stack must return the input coordinates unchanged.
        net = _random_net(4, seed=3)
        coords = torch.as_tensor(rng.standard_normal((6, 3)))
        feats = torch.as_tensor(rng.standard_normal((6, 4)))
        out_coords, _ = net(coords, feats)
        assert (out_coords - coords).abs().max() == 0.0

    def test_determinism(self, rng):
        coords = torch.as_tensor(rng.standard_normal((4, 3)))
        feats = torch.as_tensor(rng.standard_normal((4, 4)))
        a = _random_net(2, seed=5)(coords, feats)
        b = _random_net(2, seed=5)(coords, feats)
        assert (a[0] - b[0]).abs().max() == 0.0
        assert (a[1] - b[1]).abs().max() == 0.0

    def test_nonfinite_input_names_layer(self, rng):
        net = _random_net(2, seed=9)
        coords = torch.as_tensor(rng.standard_normal((3, 3)))
        coords[0, 0] = float("inf")
        feats = torch.as_tensor(rng.standard_normal((3, 4)))
        with pytest.raises(RuntimeError, match="layer 0"):
            net(coords, feats)

    def test_feature_width_checked(self, rng):
        net = _random_net(1, seed=1)
        with pytest.raises(ValueError):
            net(torch.zeros(3, 3, dtype=torch.float64), torch.zeros(3, 9, dtype=torch.float64))

    def test_edge_attr_width_checked(self, rng):
        config = EgnnConfig(num_layers=1, hidden_dim=8)
        net = Egnn(config, in_dim=2, out_dim=2, edge_attr_dim=2).double()
        coords = torch.zeros(3, 3, dtype=torch.float64)
        feats = torch.zeros(3, 2, dtype=torch.float64)
        with pytest.raises(ValueError):
            net(coords, feats, torch.zeros(3, 3, 1, dtype=torch.float64))

    def test_project_zero_cog_batched(self, rng):
        coords = torch.as_tensor(rng.standard_normal((2, 6, 3))) + 4.0
        projected = project_zero_cog(coords)
        assert projected.mean(dim=-2).abs().max() < 1e-12


class TestGradientCheck:
    def test_quadratic_is_exact(self):
        param = torch.nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))

        def loss_fn():
            return (param**2).sum()

        worst = gradient_check(loss_fn, [param])
        assert worst < 1e-9

    def test_catches_wrong_gradient(self):
        param = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))

        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x**2).sum()

            @staticmethod
            def backward(ctx, grad):
                return torch.tensor([1.0, 1.0], dtype=torch.float64)

        worst = gradient_check(lambda: Wrong.apply(param), [param])
        assert worst > 0.1
