"""Equivariant graph network layers shared by every model in the package.

Nodes carry coordinates (equivariant stream) and scalar features (invariant
stream). Graphs are fully connected. Per layer, each directed pair (i, j)
emits a message from the invariant pair state and squared distance; the
coordinate update moves x_i along the unit-free directions (x_i - x_j) with
a scalar gate per edge, and the feature update aggregates sigmoid-gated
messages. All tensor ops accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

DIST_EPS = 1e-12


@dataclass(frozen=True)
class EgnnConfig:
    """Shape and behavior of one equivariant stack."""

    num_layers: int = 4
    hidden_dim: int = 256
    use_attention: bool = True
    message_mlp_depth: int = 2

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            raise ValueError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.message_mlp_depth < 1:
            raise ValueError(f"message_mlp_depth must be >= 1, got {self.message_mlp_depth}")


def project_zero_cog(coords: Tensor) -> Tensor:
    """Remove the center of gravity along the atom axis (dim -2)."""
    return coords - coords.mean(dim=-2, keepdim=True)


def _mlp(widths: Sequence[int], final_activation: bool) -> nn.Sequential:
    layers: list[nn.Module] = []
    for idx in range(len(widths) - 1):
        layers.append(nn.Linear(widths[idx], widths[idx + 1]))
        if idx < len(widths) - 2 or final_activation:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class EgnnLayer(nn.Module):
    """One message-passing layer over a fully connected point cloud."""

    def __init__(self, config: EgnnConfig, edge_attr_dim: int = 1, layer_index: int = 0) -> None:
        super().__init__()
        hidden = config.hidden_dim
        self.config = config
        self.edge_attr_dim = edge_attr_dim
        self.layer_index = layer_index
        self.edge_mlp = _mlp(
            [2 * hidden + 1 + edge_attr_dim] + [hidden] * config.message_mlp_depth,
            final_activation=True,
        )
        coord_head = nn.Linear(hidden, 1, bias=False)
        nn.init.zeros_(coord_head.weight)
        self.coord_mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), coord_head)
        self.gate_mlp = nn.Sequential(nn.Linear(hidden, 1), nn.Sigmoid())
        self.node_mlp = _mlp([2 * hidden, hidden, hidden], final_activation=False)

    def node_update(self, feats: Tensor, aggregated: Tensor) -> Tensor:
        """Feature update given the aggregated messages (residual MLP)."""
        return feats + self.node_mlp(torch.cat([feats, aggregated], dim=-1))

    def forward(
        self, coords: Tensor, feats: Tensor, edge_attr: Tensor | None = None
    ) -> tuple[Tensor, Tensor]:
        n = coords.shape[-2]
        diff = coords.unsqueeze(-2) - coords.unsqueeze(-3)
        dist_sq = (diff * diff).sum(dim=-1, keepdim=True)
        dist = torch.sqrt(dist_sq + DIST_EPS)
        attr = dist_sq if edge_attr is None else edge_attr
        if attr.shape[-1] != self.edge_attr_dim:
            raise ValueError(
                f"edge attribute width {attr.shape[-1]} does not match layer width {self.edge_attr_dim}"
            )
        send = feats.unsqueeze(-2).expand(*feats.shape[:-1], n, feats.shape[-1])
        recv = feats.unsqueeze(-3).expand(*feats.shape[:-2], n, n, feats.shape[-1])
        messages = self.edge_mlp(torch.cat([send, recv, dist_sq, attr], dim=-1))

        off_diag = 1.0 - torch.eye(n, dtype=coords.dtype, device=coords.device).unsqueeze(-1)
        shift = diff / (dist + 1.0) * self.coord_mlp(messages) * off_diag
        coords_out = coords + shift.sum(dim=-2)

        gated = messages * self.gate_mlp(messages) if self.config.use_attention else messages
        aggregated = (gated * off_diag).sum(dim=-2)
        feats_out = self.node_update(feats, aggregated)

        if not torch.isfinite(coords_out).all() or not torch.isfinite(feats_out).all():
            raise RuntimeError(f"non-finite output in equivariant layer {self.layer_index}")
        return coords_out, feats_out


class Egnn(nn.Module):
    """Input projection, a stack of equivariant layers, and an output projection.

    The coordinate stream passes through the layers untouched by either
    projection; only scalar features are projected in and out.
    """

    def __init__(
        self, config: EgnnConfig, in_dim: int, out_dim: int, edge_attr_dim: int = 1
    ) -> None:
        super().__init__()
        self.config = config
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.embed_in = nn.Linear(in_dim, config.hidden_dim)
        self.layers = nn.ModuleList(
            EgnnLayer(config, edge_attr_dim=edge_attr_dim, layer_index=i)
            for i in range(config.num_layers)
        )
        self.embed_out = nn.Linear(config.hidden_dim, out_dim)

    def forward(
        self, coords: Tensor, feats: Tensor, edge_attr: Tensor | None = None
    ) -> tuple[Tensor, Tensor]:
        if feats.shape[-1] != self.in_dim:
            raise ValueError(f"feature width {feats.shape[-1]} does not match in_dim {self.in_dim}")
        if coords.shape[:-1] != feats.shape[:-1]:
            raise ValueError(
                f"coords {tuple(coords.shape)} and feats {tuple(feats.shape)} disagree on atoms"
            )
        hidden = self.embed_in(feats)
        for layer in self.layers:
            coords, hidden = layer(coords, hidden, edge_attr)
        return coords, self.embed_out(hidden)


def gradient_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords_per_tensor: int = 6,
    seed: int = 0,
    rel_floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` must be a deterministic closure over ``params`` returning a scalar.
    A seeded subset of coordinates is probed per tensor. Relative error is
    |ad - fd| / max(|ad|, |fd|, rel_floor); use float64 tensors for tight
    tolerances.
    """
    params = list(params)
    value = fn()
    if value.dim() != 0:
        raise ValueError("gradient_check needs a scalar-valued function")
    grads = torch.autograd.grad(value, params, allow_unused=True)
    rng = torch.Generator().manual_seed(seed)
    worst = 0.0
    for param, grad in zip(params, grads):
        numel = param.numel()
        count = min(max_coords_per_tensor, numel)
        chosen = torch.randperm(numel, generator=rng)[:count]
        flat = param.data.view(-1)
        for idx in chosen.tolist():
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + step
                upper = fn().item()
                flat[idx] = original - step
                lower = fn().item()
                flat[idx] = original
            fd = (upper - lower) / (2.0 * step)
            ad = 0.0 if grad is None else grad.view(-1)[idx].item()
            rel = abs(ad - fd) / max(abs(ad), abs(fd), rel_floor)
            worst = max(worst, rel)
    return worst
