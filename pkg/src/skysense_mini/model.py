"""Backbone container: the three spatial encoders plus temporal fusion.

Checkpoint key layout (deployment entries):
  encoder/HR/...        encoder/Ms/...       encoder/SAR/...
  fusion/...            dtpe/table           fusion/extra_token
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .augment import View
from .encoders import EncoderConfig, SpatialEncoder, check_aligned
from .fusion import FusionConfig, TemporalFusion, concat_temporal
from .types import AxisKind, ContractError, FeatureVolume, HR_CHANNELS, MS_CHANNELS, SAR_CHANNELS


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    hr_size: int = 64
    ms_size: int = 16
    hr_patch: int = 8
    ms_patch: int = 2
    sar_patch: int = 2
    encoder_depth: int = 2
    encoder_heads: int = 4
    fusion_depth: int = 2
    fusion_heads: int = 4
    mlp_ratio: float = 2.0

    def encoder_config(self, modality: str) -> EncoderConfig:
        channels = {"HR": HR_CHANNELS, "Ms": MS_CHANNELS, "SAR": SAR_CHANNELS}
        sizes = {"HR": self.hr_size, "Ms": self.ms_size, "SAR": self.ms_size}
        patches = {"HR": self.hr_patch, "Ms": self.ms_patch, "SAR": self.sar_patch}
        return EncoderConfig(
            modality=modality,
            in_channels=channels[modality],
            input_size=sizes[modality],
            patch_size=patches[modality],
            depth=self.encoder_depth,
            num_heads=self.encoder_heads,
            dim=self.dim,
            mlp_ratio=self.mlp_ratio,
        )

    @property
    def feature_grid(self) -> tuple[int, int]:
        g = self.hr_size // self.hr_patch
        return (g, g)


class MultiModalBackbone(nn.Module):
    """Spatial encoders for HR, Ms, SAR plus the temporal fusion module."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        enc_cfgs = {m: config.encoder_config(m) for m in ("HR", "Ms", "SAR")}
        check_aligned(enc_cfgs)
        self.config = config
        self.encoders = nn.ModuleDict({m: SpatialEncoder(c) for m, c in enc_cfgs.items()})
        self.fusion = TemporalFusion(
            FusionConfig(
                dim=config.dim,
                depth=config.fusion_depth,
                num_heads=config.fusion_heads,
                mlp_ratio=config.mlp_ratio,
            )
        )

    @property
    def grid(self) -> tuple[int, int]:
        return self.config.feature_grid

    def encode_modality(self, modality: str, frames: torch.Tensor) -> FeatureVolume:
        return self.encoders[modality].encode(frames)

    def encode_view(self, view: View, modalities=("HR", "Ms", "SAR")) -> dict[str, FeatureVolume]:
        """Per-modality feature volumes of one view."""
        out: dict[str, FeatureVolume] = {}
        if "HR" in modalities:
            out["HR"] = self.encode_modality("HR", view.hr_image.unsqueeze(0))
        if "Ms" in modalities:
            out["Ms"] = self.encode_modality("Ms", view.ms_series)
        if "SAR" in modalities:
            out["SAR"] = self.encode_modality("SAR", view.sar_series)
        return out

    def fuse_view(self, view: View, volumes: dict[str, FeatureVolume]) -> FeatureVolume:
        """Concatenate present modalities in HR, Ms, SAR order, date, fuse."""
        order = [m for m in ("HR", "Ms", "SAR") if m in volumes]
        if not order:
            raise ContractError("fusion needs at least one modality")
        cat = concat_temporal(*(volumes[m] for m in order))
        days = [d for m in order for d in view.dates_for(m)]
        return self.fusion.fuse_with_dates(cat, days)

    def forward_view(self, view: View) -> tuple[dict[str, FeatureVolume], FeatureVolume]:
        volumes = self.encode_view(view)
        return volumes, self.fuse_view(view, volumes)


CHECKPOINT_PREFIXES = ("encoder/HR/", "encoder/Ms/", "encoder/SAR/", "fusion/", "dtpe/")


def backbone_to_entries(backbone: MultiModalBackbone) -> dict[str, torch.Tensor]:
    """state_dict -> flat checkpoint keys."""
    entries: dict[str, torch.Tensor] = {}
    for name, tensor in backbone.state_dict().items():
        if name.startswith("encoders."):
            modality, rest = name[len("encoders."):].split(".", 1)
            key = f"encoder/{modality}/{rest}"
        elif name == "fusion.dtpe.table":
            key = "dtpe/table"
        elif name == "fusion.extra_token":
            key = "fusion/extra_token"
        elif name.startswith("fusion."):
            key = f"fusion/{name[len('fusion.'):]}"
        else:
            raise ContractError(f"unmapped backbone entry {name}")
        entries[key] = tensor
    return entries


def entries_to_backbone(entries: dict[str, torch.Tensor], config: ModelConfig) -> MultiModalBackbone:
    """Instantiate a backbone from checkpoint entries; missing keys raise."""
    backbone = MultiModalBackbone(config)
    state = {}
    for name in backbone.state_dict():
        if name.startswith("encoders."):
            modality, rest = name[len("encoders."):].split(".", 1)
            key = f"encoder/{modality}/{rest}"
        elif name == "fusion.dtpe.table":
            key = "dtpe/table"
        elif name == "fusion.extra_token":
            key = "fusion/extra_token"
        else:
            key = f"fusion/{name[len('fusion.'):]}"
        if key not in entries:
            raise KeyError(f"checkpoint is missing entry {key}")
        state[name] = torch.as_tensor(entries[key])
    backbone.load_state_dict(state)
    return backbone
