"""Geo-context: region partition, prototype bank, optimal-transport
assignment, EMA prototype updates, and attentional context integration.

The assignment convention is the uniform transportation polytope: rows of
the assignment S sum to 1/N_S and columns to 1/N_p, so S is a joint
distribution over (site, prototype) with uniform marginals and S^T F is a
balanced weighted pooling of features into prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .types import ContractError, FeatureVolume, GeoLocation


@dataclass(frozen=True)
class RegionIndex:
    """Uniform (lat, lon) grid over the globe; rows * cols regions."""

    rows: int
    cols: int

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    def region_of(self, loc: GeoLocation) -> int:
        row = int((loc.latitude + 90.0) / 180.0 * self.rows)
        row = min(row, self.rows - 1)  # latitude +90 belongs to the top row
        col = int((loc.longitude + 180.0) / 360.0 * self.cols)
        col = min(col, self.cols - 1)
        return row * self.cols + col


class FrozenBankError(ContractError):
    """Attempted update of a bank that is frozen for downstream use."""


class PrototypeBank:
    """Region-indexed prototypes [N_R, N_p, d] with EMA update state."""

    def __init__(self, region_index: RegionIndex, n_prototypes: int, dim: int,
                 momentum: float = 0.9, generator: torch.Generator | None = None):
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum {momentum} outside [0, 1)")
        self.region_index = region_index
        self.momentum = momentum
        self.frozen = False
        protos = torch.randn(region_index.n_regions, n_prototypes, dim, generator=generator)
        # unit-norm init: cosine similarity requires nonzero prototypes
        self.prototypes = protos / protos.norm(dim=-1, keepdim=True)

    @property
    def n_prototypes(self) -> int:
        return int(self.prototypes.shape[1])

    @property
    def dim(self) -> int:
        return int(self.prototypes.shape[2])

    def region_slice(self, region: int) -> torch.Tensor:
        if not 0 <= region < self.region_index.n_regions:
            raise ContractError(f"region {region} outside [0, {self.region_index.n_regions})")
        return self.prototypes[region]

    def freeze(self) -> None:
        self.frozen = True

    def update(self, region: int, assignment: torch.Tensor, features: torch.Tensor) -> None:
        """P_r <- m * P_r + (1 - m) * S^T F; touches only that region's slice."""
        if self.frozen:
            raise FrozenBankError("prototype bank is frozen; downstream runs must not update it")
        target = self.region_slice(region)
        if assignment.shape[0] != features.shape[0] or assignment.shape[1] != target.shape[0]:
            raise ContractError(
                f"assignment {tuple(assignment.shape)} incompatible with features "
                f"{tuple(features.shape)} and {target.shape[0]} prototypes"
            )
        with torch.no_grad():
            pooled = assignment.T.to(features.dtype) @ features  # [N_p, d]
            self.prototypes[region] = self.momentum * target + (1.0 - self.momentum) * pooled


def cosine_similarity(features: torch.Tensor | FeatureVolume, prototypes: torch.Tensor) -> torch.Tensor:
    """Cosine similarity matrix [N_S, N_p] between site features and prototypes."""
    f = features.data if isinstance(features, FeatureVolume) else features
    if f.ndim == 3:  # [N_S, 1, d] fused volume
        f = f.squeeze(1)
    if f.shape[-1] != prototypes.shape[-1]:
        raise ContractError(
            f"feature width {f.shape[-1]} != prototype width {prototypes.shape[-1]}"
        )
    f_norm = f.norm(dim=-1, keepdim=True)
    p_norm = prototypes.norm(dim=-1, keepdim=True)
    if (f_norm == 0).any() or (p_norm == 0).any():
        raise ContractError("cosine similarity undefined for zero-norm vectors")
    return (f / f_norm) @ (prototypes / p_norm).T


@dataclass
class AssignmentResult:
    """Similarity matrix plus the balanced assignment and its residuals."""

    similarity: torch.Tensor  # M, [N_S, N_p]
    assignment: torch.Tensor  # S, [N_S, N_p]
    row_residual: float  # max |row sum - 1/N_S|
    col_residual: float  # max |col sum - 1/N_p|


def sinkhorn_assign(similarity: torch.Tensor, n_iters: int = 3, epsilon: float = 0.05,
                    tol: float | None = None) -> AssignmentResult:
    """Alternating row/column normalization of exp(M / epsilon).

    Each iteration scales rows to sum to 1/N_S and then columns to sum to
    1/N_p; the returned assignment therefore has exact column marginals
    and row marginals converging with the iteration count. With tol set,
    iteration stops early once both marginal residuals fall below it
    (checked every 25 iterations).
    """
    if not torch.isfinite(similarity).all():
        raise ContractError("similarity matrix contains non-finite entries")
    n_s, n_p = similarity.shape
    # max-subtraction guards against overflow; float64 internals and a tiny
    # kernel floor keep small-epsilon kernels clear of underflow
    s = torch.exp((similarity.double() - similarity.max()) / epsilon).clamp_min(1e-300)
    for it in range(n_iters):
        s = s / s.sum(dim=1, keepdim=True) / n_s
        s = s / s.sum(dim=0, keepdim=True) / n_p
        if tol is not None and (it + 1) % 25 == 0:
            if float((s.sum(dim=1) - 1.0 / n_s).abs().max()) < tol:
                break
    row_res = float((s.sum(dim=1) - 1.0 / n_s).abs().max())
    col_res = float((s.sum(dim=0) - 1.0 / n_p).abs().max())
    return AssignmentResult(
        similarity=similarity,
        assignment=s.to(similarity.dtype),
        row_residual=row_res,
        col_residual=col_res,
    )


def prototype_update(bank: PrototypeBank, region: int, assignment: torch.Tensor,
                     features: torch.Tensor | FeatureVolume) -> None:
    """EMA update of one region from a sample's assignment and fused features."""
    f = features.data if isinstance(features, FeatureVolume) else features
    if f.ndim == 3:
        f = f.squeeze(1)
    bank.update(region, assignment, f.detach())


def attend_geo_context(fused: FeatureVolume, prototypes: torch.Tensor) -> FeatureVolume:
    """Concat[F, Softmax(QK^T / sqrt(d)) V] with Q=F, K=V=prototypes.

    Output width is exactly 2d: the first half is the input unchanged,
    the second half the attention-weighted prototype mixture.
    """
    if prototypes.numel() == 0 or prototypes.shape[0] == 0:
        raise ContractError("empty prototype set")
    f = fused.data.squeeze(1)  # [N_S, d]
    d = f.shape[-1]
    if prototypes.shape[-1] != d:
        raise ContractError(f"prototype width {prototypes.shape[-1]} != feature width {d}")
    weights = torch.softmax(f @ prototypes.T / d**0.5, dim=-1)  # [N_S, N_p]
    mixture = weights @ prototypes  # [N_S, d]
    out = torch.cat([f, mixture], dim=-1).unsqueeze(1)  # [N_S, 1, 2d]
    return FeatureVolume(data=out, spatial_shape=fused.spatial_shape, axis_kind=fused.axis_kind)


def prototype_argmax(features: torch.Tensor | FeatureVolume, prototypes: torch.Tensor,
                     spatial_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Most-similar prototype id per site, as an [h, w] raster."""
    if isinstance(features, FeatureVolume) and spatial_shape is None:
        spatial_shape = features.spatial_shape
    m = cosine_similarity(features, prototypes)
    ids = m.argmax(dim=-1).cpu().numpy().astype(np.int32)
    if spatial_shape is not None:
        ids = ids.reshape(spatial_shape)
    return ids


# fixed palette for prototype rasters (extended as needed, deterministic)
_PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150), (197, 176, 213), (196, 156, 148),
]


def prototype_color(prototype_id: int) -> tuple[int, int, int]:
    base = _PALETTE[prototype_id % len(_PALETTE)]
    shade = prototype_id // len(_PALETTE)
    return tuple(max(0, c - 40 * shade) for c in base)


def render_prototype_raster(ids: np.ndarray) -> np.ndarray:
    """[h, w] prototype ids -> [h, w, 3] uint8 color raster."""
    out = np.zeros(ids.shape + (3,), dtype=np.uint8)
    for pid in np.unique(ids):
        out[ids == pid] = prototype_color(int(pid))
    return out
