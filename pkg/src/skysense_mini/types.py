"""Core domain types shared by every module.

All types are immutable value objects: arrays are treated as read-only
once a sample or feature volume is constructed, so instances can be
shared freely across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

DAYS_PER_YEAR = 365


class ContractError(ValueError):
    """An operation was called with inputs violating its stated contract."""

HR_CHANNELS = 3
MS_CHANNELS = 10
SAR_CHANNELS = 2

MODALITIES = ("HR", "Ms", "SAR")


@dataclass(frozen=True)
class GeoLocation:
    """Point on the globe; latitude in [-90, 90], longitude in [-180, 180)."""

    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude < 180.0:
            raise ValueError(f"longitude {self.longitude} outside [-180, 180)")


@dataclass(frozen=True)
class DateVector:
    """Day-of-year indices, one per temporal slice across all modalities.

    Indices are 0-based into a 365-row positional table; day 366 of leap
    years is expected to be clamped to index 364 by whoever builds the
    vector.
    """

    days: tuple[int, ...]

    def __post_init__(self):
        for d in self.days:
            if not isinstance(d, (int, np.integer)) or not 0 <= int(d) < DAYS_PER_YEAR:
                raise ValueError(f"day index {d!r} outside [0, {DAYS_PER_YEAR - 1}]")
        object.__setattr__(self, "days", tuple(int(d) for d in self.days))

    def __len__(self) -> int:
        return len(self.days)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.days, dtype=np.int64)


@dataclass
class MultiModalSample:
    """One geo-aligned training unit.

    hr_image:   [3, H_HR, W_HR] float32 in [0, 1], static frame
    ms_series:  [T_Ms, 10, H_Ms, W_Ms] float32 in [0, 1]
    sar_series: [T_SAR, 2, H_SAR, W_SAR] float32 in [0, 1]
    dates:      length 1 + T_Ms + T_SAR, ordered HR, Ms, SAR
    label_map:  optional [H_HR, W_HR] int32 class ids (synthetic only)
    """

    sample_id: str
    hr_image: np.ndarray
    ms_series: np.ndarray
    sar_series: np.ndarray
    location: GeoLocation
    dates: DateVector
    label_map: np.ndarray | None = None
    cloud_masks: np.ndarray | None = None  # [T_Ms, bh, bw] bool, Ms occlusion blocks

    @property
    def t_ms(self) -> int:
        return int(self.ms_series.shape[0])

    @property
    def t_sar(self) -> int:
        return int(self.sar_series.shape[0])

    def dates_for(self, modality: str) -> tuple[int, ...]:
        """Date entries for one modality, per the fixed HR, Ms, SAR layout."""
        if modality == "HR":
            return self.dates.days[:1]
        if modality == "Ms":
            return self.dates.days[1 : 1 + self.t_ms]
        if modality == "SAR":
            return self.dates.days[1 + self.t_ms :]
        raise ValueError(f"unknown modality {modality!r}")


class AxisKind(enum.Enum):
    """Temporal-axis interpretation of a FeatureVolume."""

    PER_MODALITY = "per-modality"
    CONCATENATED = "concatenated"
    FUSED = "fused"


@dataclass
class FeatureVolume:
    """Spatial-temporal feature array with explicit axes.

    data is [N_S, T, d] with N_S == h * w; for FUSED volumes T == 1.
    The tensor may be torch or numpy; shape semantics are identical.
    """

    data: "object"  # torch.Tensor or np.ndarray, [N_S, T, d]
    spatial_shape: tuple[int, int]
    axis_kind: AxisKind = AxisKind.PER_MODALITY

    def __post_init__(self):
        h, w = self.spatial_shape
        if self.data.ndim != 3:
            raise ValueError(f"feature data must be [N_S, T, d], got shape {tuple(self.data.shape)}")
        if self.data.shape[0] != h * w:
            raise ValueError(
                f"N_S {self.data.shape[0]} != h*w {h * w} for spatial_shape {self.spatial_shape}"
            )
        if self.axis_kind is AxisKind.FUSED and self.data.shape[1] != 1:
            raise ValueError(f"fused volume must have T == 1, got T={self.data.shape[1]}")

    @property
    def n_sites(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_slices(self) -> int:
        return int(self.data.shape[1])

    @property
    def width(self) -> int:
        return int(self.data.shape[2])


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validate_sample: ok, or the list of violated invariants."""

    violations: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_sample(
    sample: MultiModalSample,
    expected_t_ms: int | None = None,
    expected_t_sar: int | None = None,
    hr_ms_ratio: int | None = None,
) -> ValidationReport:
    """Check a sample against the domain invariants; never mutates it.

    Sequence-length and resolution-ratio checks run only when the
    corresponding expectation is supplied.
    """
    v: list[str] = []

    if sample.hr_image.ndim != 3 or sample.hr_image.shape[0] != HR_CHANNELS:
        v.append(f"hr shape: expected [{HR_CHANNELS}, H, W], got {sample.hr_image.shape}")
    if sample.ms_series.ndim != 4 or sample.ms_series.shape[1] != MS_CHANNELS:
        v.append(f"ms shape: expected [T, {MS_CHANNELS}, H, W], got {sample.ms_series.shape}")
    if sample.sar_series.ndim != 4 or sample.sar_series.shape[1] != SAR_CHANNELS:
        v.append(f"sar shape: expected [T, {SAR_CHANNELS}, H, W], got {sample.sar_series.shape}")

    if expected_t_ms is not None and sample.t_ms != expected_t_ms:
        v.append(f"ms sequence length {sample.t_ms} != configured {expected_t_ms}")
    if expected_t_sar is not None and sample.t_sar != expected_t_sar:
        v.append(f"sar sequence length {sample.t_sar} != configured {expected_t_sar}")

    if sample.ms_series.ndim == 4 and sample.sar_series.ndim == 4:
        if sample.ms_series.shape[2:] != sample.sar_series.shape[2:]:
            v.append(
                f"footprint mismatch: ms {sample.ms_series.shape[2:]} vs sar {sample.sar_series.shape[2:]}"
            )
    if hr_ms_ratio is not None and sample.hr_image.ndim == 3 and sample.ms_series.ndim == 4:
        hh, hw = sample.hr_image.shape[1:]
        mh, mw = sample.ms_series.shape[2:]
        if (hh, hw) != (mh * hr_ms_ratio, mw * hr_ms_ratio):
            v.append(f"resolution ratio: hr {hh}x{hw} is not {hr_ms_ratio}x ms {mh}x{mw}")

    n_expected = 1 + sample.t_ms + sample.t_sar
    if len(sample.dates) != n_expected:
        v.append(f"date-count mismatch: {len(sample.dates)} dates for {n_expected} slices")
    for d in sample.dates.days:
        if not 0 <= d < DAYS_PER_YEAR:
            v.append(f"day out of range: {d}")

    for name, arr in (("hr", sample.hr_image), ("ms", sample.ms_series), ("sar", sample.sar_series)):
        if not np.all(np.isfinite(arr)):
            v.append(f"{name} contains non-finite values")

    if sample.label_map is not None:
        if sample.hr_image.ndim == 3 and sample.label_map.shape != sample.hr_image.shape[1:]:
            v.append(
                f"label shape {sample.label_map.shape} != hr spatial shape {sample.hr_image.shape[1:]}"
            )
        if sample.label_map.size and sample.label_map.min() < 0:
            v.append("label map contains negative class ids")

    return ValidationReport(tuple(v))


def day_of_year_index(day: int) -> int:
    """Clamp a 1-based day-of-year (1..366) to a 0-based table row (0..364)."""
    return min(max(day - 1, 0), DAYS_PER_YEAR - 1)
