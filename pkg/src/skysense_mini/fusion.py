"""Multi-modal temporal fusion.

Per spatial site, the temporal slices of all modalities are concatenated
(fixed order HR, Ms, SAR), shifted by a learnable day-of-year positional
table, prepended with a learnable aggregate token, and run through a
small transformer over the time axis. The fused representation is the
aggregate token's output, giving one vector per site.

There is deliberately no final LayerNorm after the blocks: with zeroed
residual branches the module is the exact identity on the aggregate
token, which the formula tests exploit.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .nn_blocks import TransformerBlock
from .types import AxisKind, ContractError, DAYS_PER_YEAR, FeatureVolume


def concat_temporal(*volumes: FeatureVolume) -> FeatureVolume:
    """Concatenate feature volumes along time; order is the argument order.

    Slices [0, T_0) come from the first volume, [T_0, T_0+T_1) from the
    second, and so on. Volumes with T == 0 are legal and contribute
    nothing. All inputs must share N_S, spatial shape, and width.
    """
    if not volumes:
        raise ContractError("concat_temporal needs at least one volume")
    ref = volumes[0]
    for v in volumes[1:]:
        if v.n_sites != ref.n_sites or v.spatial_shape != ref.spatial_shape:
            raise ContractError(
                f"spatial axis mismatch: {v.spatial_shape} ({v.n_sites} sites) vs "
                f"{ref.spatial_shape} ({ref.n_sites} sites)"
            )
        if v.width != ref.width:
            raise ContractError(f"channel axis mismatch: {v.width} vs {ref.width}")
    data = torch.cat([v.data for v in volumes], dim=1)
    return FeatureVolume(data=data, spatial_shape=ref.spatial_shape, axis_kind=AxisKind.CONCATENATED)


class DatePositionalTable(nn.Module):
    """Learnable [365, d] table of day-of-year offsets."""

    def __init__(self, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(DAYS_PER_YEAR, dim))
        nn.init.trunc_normal_(self.table, std=0.02)

    def lookup(self, days: torch.Tensor) -> torch.Tensor:
        """days [N_T] int -> offsets [N_T, d]; pure row indexing."""
        if days.numel() and (days.min() < 0 or days.max() >= DAYS_PER_YEAR):
            raise ContractError(
                f"day index outside [0, {DAYS_PER_YEAR - 1}]: "
                f"min {int(days.min())}, max {int(days.max())}"
            )
        return self.table[days]


def add_date_encoding(volume: FeatureVolume, days, table: DatePositionalTable) -> FeatureVolume:
    """Add table[days[t]] to temporal slice t, broadcast over sites."""
    days_t = torch.as_tensor(days, dtype=torch.long, device=volume.data.device)
    if days_t.ndim != 1 or days_t.shape[0] != volume.n_slices:
        raise ContractError(
            f"dates length {tuple(days_t.shape)} does not match T={volume.n_slices}"
        )
    offsets = table.lookup(days_t)  # [T, d]
    return FeatureVolume(
        data=volume.data + offsets.unsqueeze(0),
        spatial_shape=volume.spatial_shape,
        axis_kind=volume.axis_kind,
    )


@dataclass(frozen=True)
class FusionConfig:
    dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 2.0


class TemporalFusion(nn.Module):
    """Aggregate-token transformer over the (1 + N_T) time axis per site."""

    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        self.dtpe = DatePositionalTable(config.dim)
        self.extra_token = nn.Parameter(torch.zeros(config.dim))
        nn.init.trunc_normal_(self.extra_token, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.depth)
        )

    def forward(self, dated: torch.Tensor, need_weights: bool = False):
        """dated [N, N_T, d] -> fused [N, d]; N indexes independent sites."""
        n = dated.shape[0]
        tok = self.extra_token.expand(n, 1, -1)
        x = torch.cat([tok, dated], dim=1)  # [N, 1+N_T, d]
        weights = []
        for blk in self.blocks:
            x, w = blk(x, need_weights=need_weights)
            if need_weights:
                weights.append(w)
        return (x[:, 0, :], weights) if need_weights else (x[:, 0, :], None)

    def fuse(self, dated: FeatureVolume) -> FeatureVolume:
        """Dated concatenated volume [N_S, N_T, d] -> fused [N_S, 1, d]."""
        fused, _ = self.forward(dated.data)
        return FeatureVolume(
            data=fused.unsqueeze(1), spatial_shape=dated.spatial_shape, axis_kind=AxisKind.FUSED
        )

    def fuse_with_dates(self, concatenated: FeatureVolume, days) -> FeatureVolume:
        return self.fuse(add_date_encoding(concatenated, days, self.dtpe))
