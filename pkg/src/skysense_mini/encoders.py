"""Per-modality spatial encoders.

One small patch-embedding transformer per modality, applied to each
temporal frame independently (frames are folded into the batch axis, so
there is no cross-time mixing by construction). The three modalities are
configured so their output grids share the same (h, w): the higher HR
input resolution is absorbed by a proportionally larger patch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .nn_blocks import TransformerBlock
from .types import AxisKind, ContractError, FeatureVolume


@dataclass(frozen=True)
class EncoderConfig:
    modality: str  # "HR" | "Ms" | "SAR"
    in_channels: int
    input_size: int
    patch_size: int
    depth: int = 2
    num_heads: int = 4
    dim: int = 64
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.input_size % self.patch_size != 0:
            raise ValueError(
                f"{self.modality}: input_size {self.input_size} not divisible by patch {self.patch_size}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        g = self.input_size // self.patch_size
        return (g, g)

    @property
    def n_sites(self) -> int:
        g = self.input_size // self.patch_size
        return g * g


class SpatialEncoder(nn.Module):
    """Patch embedding + pre-norm transformer; output [N_S, T, d] per clip."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv2d(
            config.in_channels, config.dim, kernel_size=config.patch_size, stride=config.patch_size
        )
        self.pos_embed = nn.Parameter(torch.zeros(1, config.n_sites, config.dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.dim, config.num_heads, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.dim)

    def _pos_for(self, grid: tuple[int, int]) -> torch.Tensor:
        """Positional table, bilinearly resampled for off-size inputs."""
        base = self.config.grid
        if grid == base:
            return self.pos_embed
        pos = self.pos_embed.reshape(1, *base, self.config.dim).permute(0, 3, 1, 2)
        pos = torch.nn.functional.interpolate(pos, size=grid, mode="bilinear", align_corners=False)
        return pos.permute(0, 2, 3, 1).reshape(1, grid[0] * grid[1], self.config.dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames [N, C, H, W] -> site features [N, n_sites, d].

        H and W must be divisible by the patch size; inputs smaller than
        the configured size (multi-crop locals) reuse an interpolated
        positional table.
        """
        cfg = self.config
        if frames.ndim != 4:
            raise ContractError(f"{cfg.modality}: expected [N, C, H, W], got {tuple(frames.shape)}")
        if frames.shape[1] != cfg.in_channels:
            raise ContractError(
                f"{cfg.modality}: channel axis has {frames.shape[1]}, expected {cfg.in_channels}"
            )
        if frames.shape[2] % cfg.patch_size or frames.shape[3] % cfg.patch_size:
            raise ContractError(
                f"{cfg.modality}: spatial axes {tuple(frames.shape[2:])} not divisible "
                f"by patch size {cfg.patch_size}"
            )
        x = self.patch_embed(frames)  # [N, d, h, w]
        grid = (x.shape[2], x.shape[3])
        x = x.flatten(2).transpose(1, 2)  # [N, n_sites, d]
        x = x + self._pos_for(grid)
        for blk in self.blocks:
            x, _ = blk(x)
        return self.norm(x)

    def encode(self, frames: torch.Tensor) -> FeatureVolume:
        """frames [T, C, H, W] -> FeatureVolume [N_S, T, d]."""
        cfg = self.config
        if frames.ndim == 4 and frames.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ContractError(
                f"{cfg.modality}: spatial axes {tuple(frames.shape[2:])}, "
                f"expected ({cfg.input_size}, {cfg.input_size})"
            )
        feats = self.forward(frames)  # [T, N_S, d]
        return FeatureVolume(
            data=feats.permute(1, 0, 2),
            spatial_shape=self.config.grid,
            axis_kind=AxisKind.PER_MODALITY,
        )


def check_aligned(configs: dict[str, EncoderConfig]) -> None:
    """All modality encoders must emit the same spatial grid and width."""
    grids = {m: c.grid for m, c in configs.items()}
    dims = {m: c.dim for m, c in configs.items()}
    if len(set(grids.values())) > 1:
        raise ContractError(f"encoder output grids differ: {grids}")
    if len(set(dims.values())) > 1:
        raise ContractError(f"encoder widths differ: {dims}")
