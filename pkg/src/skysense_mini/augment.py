"""View augmentation with exact correspondence bookkeeping.

A view is one spatial crop (shared by all modalities of the sample, since
they cover the same footprint) plus per-modality photometric and temporal
edits. Crop geometry lives in normalized footprint coordinates, so the
mapping between any two views of a sample is an exact affine composition;
feature-site correspondence falls out of that algebra rather than being
estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .types import DAYS_PER_YEAR, DateVector, MultiModalSample


@dataclass(frozen=True)
class ViewParams:
    """Square crop box in normalized [0, 1] footprint coordinates + flip."""

    x0: float
    y0: float
    size: float
    hflip: bool = False

    def to_world(self, rel_x: np.ndarray, rel_y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """View-relative (0..1) coords -> world (footprint) coords."""
        rx = 1.0 - rel_x if self.hflip else rel_x
        return self.x0 + self.size * rx, self.y0 + self.size * rel_y

    def to_view(self, world_x: np.ndarray, world_y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rx = (world_x - self.x0) / self.size
        if self.hflip:
            rx = 1.0 - rx
        return rx, (world_y - self.y0) / self.size


IDENTITY_VIEW = ViewParams(0.0, 0.0, 1.0, False)


@dataclass
class View:
    """One augmented view of a sample, all modalities included."""

    params: ViewParams
    hr_image: torch.Tensor  # [3, H, W]
    ms_series: torch.Tensor  # [T_v, 10, h, w]
    sar_series: torch.Tensor  # [T_v', 2, h, w]
    hr_date: int
    ms_dates: tuple[int, ...]
    sar_dates: tuple[int, ...]
    ms_indices: tuple[int, ...]  # which stored frames were selected
    sar_indices: tuple[int, ...]
    hr_locals: list[torch.Tensor] = field(default_factory=list)  # small crops, image-level only

    @property
    def dates(self) -> DateVector:
        return DateVector((self.hr_date,) + self.ms_dates + self.sar_dates)

    def dates_for(self, modality: str) -> tuple[int, ...]:
        return {"HR": (self.hr_date,), "Ms": self.ms_dates, "SAR": self.sar_dates}[modality]


@dataclass
class ViewCorrespondence:
    """Invertible site mapping between two views at feature resolution.

    Matched pairs are mutual nearest feature cells whose centers, mapped
    through view-1-inverse then view-2-forward, land within half a cell
    of each other. Mutuality makes the pairing bijective on the overlap.
    """

    params_u: ViewParams
    params_v: ViewParams
    grid: tuple[int, int]  # feature (h, w), shared by all modalities
    idx_u: np.ndarray = field(init=False)  # [n_overlap] flat site ids in view u
    idx_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.idx_u, self.idx_v = _match_sites(self.params_u, self.params_v, self.grid)

    @property
    def n_overlap(self) -> int:
        return len(self.idx_u)

    def overlap_mask_u(self) -> np.ndarray:
        mask = np.zeros(self.grid[0] * self.grid[1], dtype=bool)
        mask[self.idx_u] = True
        return mask.reshape(self.grid)

    @property
    def is_identity(self) -> bool:
        n = self.grid[0] * self.grid[1]
        return self.n_overlap == n and np.array_equal(self.idx_u, self.idx_v) and np.array_equal(
            self.idx_u, np.arange(n)
        )


def _site_centers(grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = grid
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return (xs.ravel() + 0.5) / w, (ys.ravel() + 0.5) / h


def _nearest_in(params_a: ViewParams, params_b: ViewParams, grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """For each site of view a: nearest site id in view b, and validity."""
    h, w = grid
    rel_x, rel_y = _site_centers(grid)
    wx, wy = params_a.to_world(rel_x, rel_y)
    bx, by = params_b.to_view(wx, wy)
    # continuous cell coordinates in view b
    cx, cy = bx * w - 0.5, by * h - 0.5
    jx, jy = np.rint(cx).astype(int), np.rint(cy).astype(int)
    ok = (
        (np.abs(cx - jx) <= 0.5)
        & (np.abs(cy - jy) <= 0.5)
        & (jx >= 0) & (jx < w) & (jy >= 0) & (jy < h)
    )
    return jy * w + jx, ok


def _match_sites(params_u: ViewParams, params_v: ViewParams, grid: tuple[int, int]):
    uv, ok_uv = _nearest_in(params_u, params_v, grid)
    vu, ok_vu = _nearest_in(params_v, params_u, grid)
    n = grid[0] * grid[1]
    u_ids = np.arange(n)
    cand = u_ids[ok_uv]
    v_of_u = uv[ok_uv]
    mutual = ok_vu[v_of_u] & (vu[v_of_u] == cand)
    return cand[mutual].copy(), v_of_u[mutual].copy()


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for the two-view augmentation pipeline."""

    global_scale: tuple[float, float] = (0.5, 1.0)  # crop area fraction range
    hflip_prob: float = 0.5
    t_ms_view: int = 4
    t_sar_view: int = 2
    date_jitter: int = 7  # Ms/SAR acquisition-day disturbance, +-days
    local_crops: int = 2  # HR multi-crop count (image-level loss only)
    local_scale: tuple[float, float] = (0.15, 0.4)
    local_size: int = 32
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.3, 1.2)
    solarize_prob: float = 0.2
    solarize_threshold: float = 0.7
    brightness_prob: float = 0.8
    brightness_range: tuple[float, float] = (0.7, 1.3)

    @staticmethod
    def identity(t_ms: int, t_sar: int) -> "AugmentConfig":
        """No-op configuration: full crop, no flips, no photometrics."""
        return AugmentConfig(
            global_scale=(1.0, 1.0), hflip_prob=0.0, t_ms_view=t_ms, t_sar_view=t_sar,
            date_jitter=0, local_crops=0, blur_prob=0.0, solarize_prob=0.0, brightness_prob=0.0,
        )


def crop_resize(img: torch.Tensor, params: ViewParams, out_size: int) -> torch.Tensor:
    """Sample a view's pixels from [.., C, H, W] via bilinear interpolation."""
    rel = (np.arange(out_size) + 0.5) / out_size
    wx, wy = params.to_world(rel, rel)  # x and y transforms are independent
    gx = torch.as_tensor(2.0 * wx - 1.0, dtype=img.dtype)
    gy = torch.as_tensor(2.0 * wy - 1.0, dtype=img.dtype)
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij"), dim=-1)[..., [1, 0]]
    batched = img.reshape((-1,) + img.shape[-3:])
    out = F.grid_sample(
        batched, grid.unsqueeze(0).expand(batched.shape[0], -1, -1, -1),
        mode="bilinear", padding_mode="border", align_corners=False,
    )
    return out.reshape(img.shape[:-2] + (out_size, out_size))


def gaussian_blur(img: torch.Tensor, sigma: float, kernel_size: int = 5) -> torch.Tensor:
    """Separable Gaussian blur of [C, H, W]."""
    half = kernel_size // 2
    xs = torch.arange(kernel_size, dtype=img.dtype) - half
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    k = k / k.sum()
    c = img.shape[0]
    pad = (half, half)
    x = img.unsqueeze(0)
    x = F.conv2d(F.pad(x, pad + (0, 0), mode="reflect"), k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(F.pad(x, (0, 0) + pad, mode="reflect"), k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x.squeeze(0)


def solarize(img: torch.Tensor, threshold: float) -> torch.Tensor:
    return torch.where(img > threshold, 1.0 - img, img)


def _jitter_dates(days, jitter: int, rng: np.random.Generator) -> tuple[int, ...]:
    if jitter == 0:
        return tuple(int(d) for d in days)
    shifted = np.asarray(days) + rng.integers(-jitter, jitter + 1, size=len(days))
    return tuple(int(d) for d in np.clip(shifted, 0, DAYS_PER_YEAR - 1))


def _sample_box(rng: np.random.Generator, scale: tuple[float, float], hflip_prob: float) -> ViewParams:
    size = float(np.sqrt(rng.uniform(scale[0], scale[1])))
    size = min(size, 1.0)
    x0 = float(rng.uniform(0.0, 1.0 - size))
    y0 = float(rng.uniform(0.0, 1.0 - size))
    return ViewParams(x0=x0, y0=y0, size=size, hflip=bool(rng.uniform() < hflip_prob))


def _photometric_hr(img: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    if rng.uniform() < cfg.brightness_prob:
        img = img * float(rng.uniform(*cfg.brightness_range))
    if rng.uniform() < cfg.blur_prob:
        img = gaussian_blur(img, float(rng.uniform(*cfg.blur_sigma)))
    if rng.uniform() < cfg.solarize_prob:
        img = solarize(img, cfg.solarize_threshold)
    return img.clamp(0.0, 1.0)


def make_view(sample: MultiModalSample, cfg: AugmentConfig, rng: np.random.Generator) -> View:
    """Draw one augmented view; all randomness comes from rng."""
    params = _sample_box(rng, cfg.global_scale, cfg.hflip_prob)

    hr = torch.from_numpy(np.ascontiguousarray(sample.hr_image))
    ms = torch.from_numpy(np.ascontiguousarray(sample.ms_series))
    sar = torch.from_numpy(np.ascontiguousarray(sample.sar_series))

    t_ms = min(cfg.t_ms_view, sample.t_ms)
    t_sar = min(cfg.t_sar_view, sample.t_sar)
    ms_idx = np.sort(rng.choice(sample.t_ms, size=t_ms, replace=False))
    sar_idx = np.sort(rng.choice(sample.t_sar, size=t_sar, replace=False))

    hr_view = _photometric_hr(crop_resize(hr, params, hr.shape[-1]), cfg, rng)
    ms_view = crop_resize(ms[ms_idx], params, ms.shape[-1])
    sar_view = crop_resize(sar[sar_idx], params, sar.shape[-1])

    ms_dates_all = np.asarray(sample.dates_for("Ms"))
    sar_dates_all = np.asarray(sample.dates_for("SAR"))
    locals_ = []
    for _ in range(cfg.local_crops):
        lp = _sample_box(rng, cfg.local_scale, cfg.hflip_prob)
        locals_.append(_photometric_hr(crop_resize(hr, lp, cfg.local_size), cfg, rng))

    return View(
        params=params,
        hr_image=hr_view,
        ms_series=ms_view,
        sar_series=sar_view,
        hr_date=sample.dates_for("HR")[0],
        ms_dates=_jitter_dates(ms_dates_all[ms_idx], cfg.date_jitter, rng),
        sar_dates=_jitter_dates(sar_dates_all[sar_idx], cfg.date_jitter, rng),
        ms_indices=tuple(int(i) for i in ms_idx),
        sar_indices=tuple(int(i) for i in sar_idx),
        hr_locals=locals_,
    )


def augment(sample: MultiModalSample, cfg: AugmentConfig, rng: np.random.Generator,
            feature_grid: tuple[int, int]) -> tuple[View, View, ViewCorrespondence]:
    """Two augmented view-sets plus their exact site correspondence."""
    u = make_view(sample, cfg, rng)
    v = make_view(sample, cfg, rng)
    corr = ViewCorrespondence(params_u=u.params, params_v=v.params, grid=feature_grid)
    return u, v, corr


def identity_view(sample: MultiModalSample) -> View:
    """The untouched sample as a View (used by feature extraction)."""
    return View(
        params=IDENTITY_VIEW,
        hr_image=torch.from_numpy(np.ascontiguousarray(sample.hr_image)),
        ms_series=torch.from_numpy(np.ascontiguousarray(sample.ms_series)),
        sar_series=torch.from_numpy(np.ascontiguousarray(sample.sar_series)),
        hr_date=sample.dates_for("HR")[0],
        ms_dates=sample.dates_for("Ms"),
        sar_dates=sample.dates_for("SAR"),
        ms_indices=tuple(range(sample.t_ms)),
        sar_indices=tuple(range(sample.t_sar)),
    )
