"""Stochastic spatial augmentation: affine warps, elastic deformation
and rotations, each realized as a single inverse-mapped resampling.

Images are interpolated bilinearly, masks with nearest-neighbour so
they stay strictly binary, and both use border replication (source
coordinates clamp to the grid). Identity parameters reproduce the
input bit for bit because integer source coordinates hit the bilinear
kernel's exact-sample case.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import CineSample

__all__ = ["AugmentConfig", "elastic", "rotate", "affine", "pipeline", "expand"]


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for the augmentation pipeline.

    Displacement strength alpha is in pixels; sigma is the Gaussian
    smoothing radius of the elastic field. rotate_degrees bounds the
    uniform angle draw; scale/shear/translate bound the affine draws.
    Each transform fires independently with its probability.
    """

    elastic_alpha: float = 34.0
    elastic_sigma: float = 4.0
    rotate_degrees: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    shear_max: float = 0.1
    translate_px: float = 3.0
    p_affine: float = 0.5
    p_elastic: float = 0.5
    p_rotate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.elastic_alpha < 0:
            raise ValueError(f"elastic_alpha must be >= 0, got {self.elastic_alpha}")
        if self.elastic_sigma <= 0:
            raise ValueError(f"elastic_sigma must be positive, got {self.elastic_sigma}")
        if self.rotate_degrees < 0:
            raise ValueError(f"rotate_degrees must be >= 0, got {self.rotate_degrees}")
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"scale_range must be 0 < lo <= hi, got {self.scale_range}")
        if self.shear_max < 0 or self.translate_px < 0:
            raise ValueError("shear_max and translate_px must be >= 0")
        for name in ("p_affine", "p_elastic", "p_rotate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")


def _check_pair(image, mask):
    img = np.asarray(image, dtype=np.float64)
    msk = np.asarray(mask)
    if img.ndim != 2 or msk.shape != img.shape:
        raise ValueError(
            f"image and mask must be matching 2-D grids, got {img.shape} and {msk.shape}"
        )
    if not np.isin(msk, (0, 1)).all():
        raise ValueError("mask must be binary")
    return img, msk.astype(np.uint8)


def _sample_bilinear(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = ys - y0
    tx = xs - x0
    return (
        grid[y0, x0] * (1.0 - ty) * (1.0 - tx)
        + grid[y0, x1] * (1.0 - ty) * tx
        + grid[y1, x0] * ty * (1.0 - tx)
        + grid[y1, x1] * ty * tx
    )


def _sample_nearest(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    yi = np.clip(np.rint(ys), 0, h - 1).astype(np.intp)
    xi = np.clip(np.rint(xs), 0, w - 1).astype(np.intp)
    return grid[yi, xi]


def _resample_pair(image, mask, ys, xs):
    return _sample_bilinear(image, ys, xs), _sample_nearest(mask, ys, xs)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3 sigma, reflect
    padding so the field variance stays roughly stationary at borders."""
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    for axis in (0, 1):
        moved = np.moveaxis(field, axis, 0)
        padded = np.pad(moved, ((r, r), (0, 0)), mode="reflect")
        windows = sliding_window_view(padded, len(k), axis=0)
        moved = windows @ k
        field = np.moveaxis(moved, 0, axis)
    return field


def elastic(image, mask, alpha: float, sigma: float,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random elastic warp: per-pixel uniform displacements in [-1, 1],
    Gaussian-smoothed with std sigma, scaled by alpha pixels.

    alpha = 0 is the exact identity (the displacement field is exactly
    zero, so sources land on integer coordinates).
    """
    img, msk = _check_pair(image, mask)
    if alpha < 0 or sigma <= 0:
        raise ValueError(f"need alpha >= 0 and sigma > 0, got {alpha}, {sigma}")
    h, w = img.shape
    dx = _smooth(rng.uniform(-1.0, 1.0, (h, w)), sigma) * alpha
    dy = _smooth(rng.uniform(-1.0, 1.0, (h, w)), sigma) * alpha
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return _resample_pair(img, msk, ys + dy, xs + dx)


def _rotate_by(image, mask, angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    img, msk = _check_pair(image, mask)
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    # inverse map: rotate output coordinates by -theta about the center
    src_x = cx + cos_t * dx + sin_t * dy
    src_y = cy - sin_t * dx + cos_t * dy
    return _resample_pair(img, msk, src_y, src_x)


def rotate(image, mask, degrees: float, rng: np.random.Generator):
    """Rotate both grids about the image center by a uniform random
    angle in [-degrees, +degrees]. degrees = 0 is the exact identity."""
    if degrees < 0:
        raise ValueError(f"degrees must be >= 0, got {degrees}")
    if degrees == 0.0:
        img, msk = _check_pair(image, mask)
        return img.copy(), msk.copy()
    angle = rng.uniform(-degrees, degrees)
    return _rotate_by(image, mask, angle)


def _affine_by(image, mask, scale: float, shear: float, tx: float, ty: float):
    img, msk = _check_pair(image, mask)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # forward map is dst = M (src - c) + c + t with M = scale * [[1, shear], [0, 1]];
    # resample by the inverse: M^-1 = (1/scale) * [[1, -shear], [0, 1]]
    dx = xs - cx - tx
    dy = ys - cy - ty
    src_x = cx + (dx - shear * dy) / scale
    src_y = cy + dy / scale
    return _resample_pair(img, msk, src_y, src_x)


def affine(image, mask, config: AugmentConfig, rng: np.random.Generator):
    """Scale/shear/translate with parameters drawn from config bounds,
    applied as one composed resampling. Returns (image, mask, scale);
    the caller divides the pixel spacing by scale, since magnifying the
    scene shrinks the physical size each pixel represents."""
    lo, hi = config.scale_range
    scale = rng.uniform(lo, hi)
    shear = rng.uniform(-config.shear_max, config.shear_max)
    tx = rng.uniform(-config.translate_px, config.translate_px)
    ty = rng.uniform(-config.translate_px, config.translate_px)
    out_img, out_msk = _affine_by(image, mask, scale, shear, tx, ty)
    return out_img, out_msk, scale


def pipeline(sample: CineSample, config: AugmentConfig, sample_index: int) -> CineSample:
    """Apply the configured transforms to one sample.

    The RNG stream is derived from (config.seed, sample_index) alone,
    so replaying the same pair is bit-identical regardless of what was
    augmented before. Transform order is affine, elastic, rotation.
    """
    rng = np.random.default_rng((config.seed, sample_index))
    img, msk = sample.image, sample.mask
    sx, sy = sample.spacing_mm
    if rng.uniform() < config.p_affine:
        img, msk, scale = affine(img, msk, config, rng)
        sx, sy = sx / scale, sy / scale
    if rng.uniform() < config.p_elastic and config.elastic_alpha > 0:
        img, msk = elastic(img, msk, config.elastic_alpha, config.elastic_sigma, rng)
    if rng.uniform() < config.p_rotate and config.rotate_degrees > 0:
        img, msk = rotate(img, msk, config.rotate_degrees, rng)
    return CineSample(
        image=img, mask=msk, spacing_mm=(sx, sy),
        case_id=sample.case_id, slice_id=sample.slice_id,
        truth_contour=None,  # the polyline no longer matches the warped mask
    )


def expand(samples: list[CineSample], config: AugmentConfig,
           copies: int = 2) -> list[CineSample]:
    """Originals plus `copies` augmented variants of each sample; the
    result has (copies + 1) * len(samples) items."""
    if copies < 0:
        raise ValueError(f"copies must be >= 0, got {copies}")
    out = list(samples)
    n = len(samples)
    for c in range(copies):
        for i, s in enumerate(samples):
            out.append(pipeline(s, config, c * n + i))
    return out
