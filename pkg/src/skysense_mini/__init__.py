"""Desk-scale multi-modal remote-sensing pre-training framework.

Factorized spatial/temporal encoding of geo-aligned optical, multispectral
and SAR inputs, teacher-student contrastive pre-training at pixel, object
and image granularity, cross-modal alignment, and region-indexed prototype
learning — plus a synthetic data generator and probe harness that make
every mechanism testable on a laptop.
"""

from .types import (
    AxisKind,
    ContractError,
    DateVector,
    FeatureVolume,
    GeoLocation,
    MultiModalSample,
    ValidationReport,
    validate_sample,
)

__all__ = [
    "AxisKind",
    "ContractError",
    "DateVector",
    "FeatureVolume",
    "GeoLocation",
    "MultiModalSample",
    "ValidationReport",
    "validate_sample",
]

__version__ = "0.1.0"
