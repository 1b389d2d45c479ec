"""Deterministic generator of geo-aligned multi-modal temporal samples.

The synthetic world is a grid of regions over the globe. Each sample is a
contiguous landcover patch drawn from smoothed random fields, rendered
into three modalities:

  HR   static 3-band texture image at the fine grid
  Ms   10-band time series following per-class seasonal sinusoids,
       optionally occluded by cloud blocks
  SAR  2-polarization time series from per-class backscatter means,
       unaffected by clouds

Classes carry intentionally complementary signatures: one pair of classes
shares its HR appearance (only Ms/SAR separate them), and HR brightness
varies per sample, so multi-modal features genuinely out-inform HR alone.
All randomness is keyed by (seed, sample_index); generation order and
parallelism cannot change the output bytes.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sample_io
from .types import (
    DAYS_PER_YEAR,
    DateVector,
    GeoLocation,
    MS_CHANNELS,
    MultiModalSample,
    SAR_CHANNELS,
)

TEXTURE_FAMILIES = ("flat", "speckle", "blocks", "stripes-v", "stripes-h", "checker")

CLOUD_BRIGHTNESS = 0.95
CLOUD_BLOCK = 4  # Ms pixels per occlusion block edge

# Minimum inter-class signature distances enforced at construction.
MIN_MS_DIST = 0.25
MIN_SAR_DIST = 0.12


@dataclass(frozen=True)
class ClassSignature:
    """Per-class rendering parameters across the three modalities."""

    hr_color: tuple[float, float, float]
    hr_texture: str  # one of TEXTURE_FAMILIES
    hr_texture_scale: float
    ms_mean: tuple[float, ...]  # [10]
    ms_amp: tuple[float, ...]  # [10], seasonal sinusoid amplitude per band
    ms_phase: float  # day offset of the sinusoid
    sar_mean: tuple[float, float]

    def __post_init__(self):
        if self.hr_texture not in TEXTURE_FAMILIES:
            raise ValueError(f"unknown texture family {self.hr_texture!r}")
        if len(self.ms_mean) != MS_CHANNELS or len(self.ms_amp) != MS_CHANNELS:
            raise ValueError("ms signature must cover all 10 bands")
        if len(self.sar_mean) != SAR_CHANNELS:
            raise ValueError("sar signature must cover both polarizations")


@dataclass(frozen=True)
class WorldSpec:
    """Complete description of a synthetic world; a pure function of itself.

    Two equal WorldSpecs generate byte-identical datasets.
    """

    seed: int
    num_classes: int = 6
    region_grid: tuple[int, int] = (4, 4)
    class_signatures: tuple[ClassSignature, ...] = ()
    cloud_rate: float = 0.0

    hr_size: int = 64
    ms_size: int = 16
    t_ms: int = 8
    t_sar: int = 4

    hr_noise: float = 0.10
    ms_noise: float = 0.02
    sar_noise: float = 0.03
    illumination_range: tuple[float, float] = (0.65, 1.35)
    field_cells: int = 5  # low-res grid edge of the landcover fields
    region_bias: float = 0.6

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.hr_size % self.ms_size != 0:
            raise ValueError("hr_size must be a multiple of ms_size")
        if not 0.0 <= self.cloud_rate <= 1.0:
            raise ValueError("cloud_rate must be in [0, 1]")
        sigs = self.class_signatures or _default_signatures(self.seed, self.num_classes)
        if len(sigs) != self.num_classes:
            raise ValueError("one signature per class required")
        _check_distinguishable(sigs)
        object.__setattr__(self, "class_signatures", tuple(sigs))

    @property
    def n_regions(self) -> int:
        return self.region_grid[0] * self.region_grid[1]

    @property
    def hr_ms_ratio(self) -> int:
        return self.hr_size // self.ms_size

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["class_signatures"] = [dataclasses.asdict(s) for s in self.class_signatures]
        return d

    @staticmethod
    def from_dict(d: dict) -> "WorldSpec":
        d = dict(d)
        sigs = tuple(
            ClassSignature(
                hr_color=tuple(s["hr_color"]),
                hr_texture=s["hr_texture"],
                hr_texture_scale=s["hr_texture_scale"],
                ms_mean=tuple(s["ms_mean"]),
                ms_amp=tuple(s["ms_amp"]),
                ms_phase=s["ms_phase"],
                sar_mean=tuple(s["sar_mean"]),
            )
            for s in d.get("class_signatures", [])
        )
        d["class_signatures"] = sigs
        d["region_grid"] = tuple(d["region_grid"])
        d["illumination_range"] = tuple(d["illumination_range"])
        return WorldSpec(**d)


def _check_distinguishable(sigs) -> None:
    for i in range(len(sigs)):
        for j in range(i + 1, len(sigs)):
            ms_d = float(np.linalg.norm(np.subtract(sigs[i].ms_mean, sigs[j].ms_mean)))
            sar_d = float(np.linalg.norm(np.subtract(sigs[i].sar_mean, sigs[j].sar_mean)))
            if ms_d < MIN_MS_DIST or sar_d < MIN_SAR_DIST:
                raise ValueError(
                    f"classes {i} and {j} are not distinguishable "
                    f"(ms distance {ms_d:.3f}, sar distance {sar_d:.3f})"
                )


def _default_signatures(seed: int, num_classes: int) -> tuple[ClassSignature, ...]:
    """Deterministic well-separated signatures.

    All classes share the same gray HR base color and differ only in
    texture family, so HR class identity lives in spatial structure alone;
    multispectral and SAR signatures carry the per-class spectral signal.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC1A55]))
    for _ in range(200):
        ms_means = rng.uniform(0.2, 0.8, size=(num_classes, MS_CHANNELS))
        sar_means = rng.uniform(0.15, 0.85, size=(num_classes, SAR_CHANNELS))
        phases = rng.uniform(0, DAYS_PER_YEAR, size=num_classes)
        amps = rng.uniform(0.05, 0.15, size=(num_classes, MS_CHANNELS))
        scales = rng.uniform(0.2, 0.3, size=num_classes)
        sigs = []
        for c in range(num_classes):
            sigs.append(
                ClassSignature(
                    hr_color=(0.5, 0.5, 0.5),
                    hr_texture=TEXTURE_FAMILIES[c % len(TEXTURE_FAMILIES)],
                    hr_texture_scale=float(scales[c]),
                    ms_mean=tuple(float(x) for x in ms_means[c]),
                    ms_amp=tuple(float(x) for x in amps[c]),
                    ms_phase=float(phases[c]),
                    sar_mean=tuple(float(x) for x in sar_means[c]),
                )
            )
        try:
            _check_distinguishable(sigs)
        except ValueError:
            continue
        return tuple(sigs)
    raise ValueError("could not construct distinguishable class signatures")


def temporal_signal(spec: WorldSpec, class_id: int, band: int, day: int) -> float:
    """Seasonal band value: mean + amplitude * sin(2*pi*(day - phase)/365)."""
    sig = spec.class_signatures[class_id]
    if not 0 <= band < MS_CHANNELS:
        raise ValueError(f"band {band} outside [0, {MS_CHANNELS})")
    if not 0 <= day < DAYS_PER_YEAR:
        raise ValueError(f"day {day} outside [0, {DAYS_PER_YEAR})")
    return sig.ms_mean[band] + sig.ms_amp[band] * math.sin(
        2.0 * math.pi * (day - sig.ms_phase) / DAYS_PER_YEAR
    )


def temporal_signal_table(spec: WorldSpec, days: np.ndarray) -> np.ndarray:
    """Vectorized clean Ms values, shape [num_classes, len(days), 10]."""
    means = np.array([s.ms_mean for s in spec.class_signatures])  # [C, 10]
    amps = np.array([s.ms_amp for s in spec.class_signatures])
    phases = np.array([s.ms_phase for s in spec.class_signatures])  # [C]
    arg = 2.0 * np.pi * (days[None, :, None] - phases[:, None, None]) / DAYS_PER_YEAR
    return means[:, None, :] + amps[:, None, :] * np.sin(arg)


def _sample_rng(seed: int, sample_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A3B1E, int(sample_index)]))


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Upsample a [g, g] grid to [size, size] with bilinear interpolation."""
    g = grid.shape[0]
    # target pixel centers in grid coordinates
    pos = (np.arange(size) + 0.5) / size * (g - 1 + 1e-9)
    i0 = np.floor(pos).astype(int)
    frac = pos - i0
    i1 = np.minimum(i0 + 1, g - 1)
    top = grid[np.ix_(i0, i0)] * np.outer(1 - frac, 1 - frac) + grid[np.ix_(i0, i1)] * np.outer(1 - frac, frac)
    bot = grid[np.ix_(i1, i0)] * np.outer(frac, 1 - frac) + grid[np.ix_(i1, i1)] * np.outer(frac, frac)
    return top + bot


def _landcover(spec: WorldSpec, rng: np.random.Generator, region_id: int) -> np.ndarray:
    """Contiguous class map [hr, hr]: argmax over smoothed per-class fields."""
    g = spec.field_cells
    fields = np.stack(
        [_bilinear_upsample(rng.normal(size=(g, g)), spec.hr_size) for _ in range(spec.num_classes)]
    )
    # each region systematically favors two classes, giving prototypes a
    # regional signal to pick up
    bias = np.zeros(spec.num_classes)
    bias[region_id % spec.num_classes] += spec.region_bias
    bias[(region_id // 2 + 1) % spec.num_classes] += spec.region_bias * 0.5
    return np.argmax(fields + bias[:, None, None], axis=0).astype(np.int32)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Majority vote over factor x factor blocks; ties go to the lowest id."""
    h, w = labels.shape
    blocks = labels.reshape(h // factor, factor, w // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // factor, w // factor, factor * factor)
    n_cls = int(labels.max()) + 1
    counts = np.zeros(blocks.shape[:2] + (n_cls,), dtype=np.int32)
    for c in range(n_cls):
        counts[..., c] = (blocks == c).sum(axis=-1)
    # np.argmax returns the first maximum, which is the lowest class id
    return np.argmax(counts, axis=-1).astype(np.int32)


def _texture(sig: ClassSignature, rng: np.random.Generator, size: int) -> np.ndarray:
    """Gray texture field in [-scale, scale]; classes differ by pattern only.

    HR carries no color signal, so telling classes apart in HR requires
    recognizing spatial structure, not reading off a channel mean.
    """
    amp = sig.hr_texture_scale
    xs = np.arange(size, dtype=float)
    phase = rng.uniform(0, size)
    if sig.hr_texture == "flat":
        return np.zeros((size, size))
    if sig.hr_texture == "speckle":
        return amp * rng.uniform(-1.0, 1.0, size=(size, size))
    if sig.hr_texture == "blocks":
        block = 4
        coarse = rng.uniform(-1.0, 1.0, size=(size // block, size // block))
        return amp * np.kron(coarse, np.ones((block, block)))
    if sig.hr_texture == "stripes-v":
        return amp * np.tile(np.sin(2 * np.pi * (xs + phase) / 5.0), (size, 1))
    if sig.hr_texture == "stripes-h":
        return amp * np.tile(np.sin(2 * np.pi * (xs + phase) / 5.0)[:, None], (1, size))
    # checker
    wave = np.sin(2 * np.pi * (xs + phase) / 8.0)
    return amp * np.sign(np.outer(wave, wave))


def _region_of_index(spec: WorldSpec, sample_index: int) -> int:
    return sample_index % spec.n_regions


def _location_in_region(spec: WorldSpec, region_id: int, rng: np.random.Generator) -> GeoLocation:
    rows, cols = spec.region_grid
    r, c = divmod(region_id, cols)
    lat0 = -90.0 + 180.0 * r / rows
    lon0 = -180.0 + 360.0 * c / cols
    lat = lat0 + rng.uniform(0.05, 0.95) * 180.0 / rows
    lon = lon0 + rng.uniform(0.05, 0.95) * 360.0 / cols
    return GeoLocation(latitude=float(lat), longitude=float(lon))


def generate_sample(spec: WorldSpec, sample_index: int) -> MultiModalSample:
    """Render sample number sample_index; pure function of (spec, index)."""
    rng = _sample_rng(spec.seed, sample_index)
    region_id = _region_of_index(spec, sample_index)
    location = _location_in_region(spec, region_id, rng)

    labels = _landcover(spec, rng, region_id)
    ms_labels = downsample_labels(labels, spec.hr_ms_ratio)

    hr_day = int(rng.integers(0, DAYS_PER_YEAR))
    ms_days = np.sort(rng.choice(DAYS_PER_YEAR, size=spec.t_ms, replace=False)).astype(int)
    sar_days = np.sort(rng.choice(DAYS_PER_YEAR, size=spec.t_sar, replace=False)).astype(int)
    dates = DateVector(tuple([hr_day] + list(ms_days) + list(sar_days)))

    # HR: class color + class texture, sample-wide illumination, pixel noise
    colors = np.array([s.hr_color for s in spec.class_signatures])  # [C, 3]
    hr = colors[labels].transpose(2, 0, 1).copy()  # [3, H, W]
    for c, sig in enumerate(spec.class_signatures):
        mask = labels == c
        if mask.any():
            hr[:, mask] += _texture(sig, rng, spec.hr_size)[mask]
    illum = rng.uniform(*spec.illumination_range)
    hr = illum * hr + rng.normal(0.0, spec.hr_noise, size=hr.shape)
    hr = np.clip(hr, 0.0, 1.0).astype(np.float32)

    # Ms: seasonal signal per class evaluated at each frame's date + noise
    signal = temporal_signal_table(spec, ms_days)  # [C, T, 10]
    ms = signal[ms_labels].transpose(2, 3, 0, 1)  # [T, 10, h, w]
    ms = ms + rng.normal(0.0, spec.ms_noise, size=ms.shape)

    # cloud occlusion in fixed blocks; mask kept in metadata
    bh = spec.ms_size // CLOUD_BLOCK
    cloud = rng.uniform(size=(spec.t_ms, bh, bh)) < spec.cloud_rate
    if cloud.any():
        full = np.kron(cloud, np.ones((CLOUD_BLOCK, CLOUD_BLOCK), dtype=bool))  # [T, h, w]
        ms = np.where(full[:, None, :, :], CLOUD_BRIGHTNESS, ms)
    ms = np.clip(ms, 0.0, 1.0).astype(np.float32)

    # SAR: backscatter means per polarization + noise; clouds never apply
    sar_means = np.array([s.sar_mean for s in spec.class_signatures])  # [C, 2]
    sar = sar_means[ms_labels].transpose(2, 0, 1)  # [2, h, w]
    sar = np.broadcast_to(sar, (spec.t_sar,) + sar.shape).copy()
    sar = sar + rng.normal(0.0, spec.sar_noise, size=sar.shape)
    sar = np.clip(sar, 0.0, 1.0).astype(np.float32)

    return MultiModalSample(
        sample_id=f"sample_{sample_index:05d}",
        hr_image=hr,
        ms_series=ms,
        sar_series=sar,
        location=location,
        dates=dates,
        label_map=labels,
        cloud_masks=cloud,
    )


def generate_dataset(spec: WorldSpec, n_samples: int, out_dir: Path) -> Path:
    """Write n_samples samples plus a manifest under out_dir."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    splits = {}
    for i in range(n_samples):
        sample = generate_sample(spec, i)
        sample_io.save_sample(sample, out)
        ids.append(sample.sample_id)
        # multiplicative hash (high bits) decorrelates the 1/8 val split
        # from the region cycling, so every region appears in both splits
        h = (i * 2654435761 % 2**32) >> 16
        splits[sample.sample_id] = "val" if h % 8 == 7 else "train"
    sample_io.write_manifest(out, ids, splits, extra={"world_spec": spec.to_dict()})
    return out
