"""Parametric desk-scale atmospheric turbulence: tilt warp, variant blur, noise.

Images are float arrays in [-1, 1] with shape (C, H, W). Fields are generated
at unit severity and scaled linearly by ``d_r0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

CORRELATION_LENGTH = 8.0
UNIT_TILT_RMS = 1.0
UNIT_BLUR_MEAN = 0.75
SIGMA_MAX = 3.0
NOISE_STD = 0.01

# min-max normalization constants for the regression target
PHI_LO = np.array([0.5, 0.0, 0.0])
PHI_HI = np.array([2.0, 2.5, 2.0])


@dataclass
class DegradationParams:
    d_r0: float
    tilt_field: np.ndarray  # (2, H, W) displacement (dy, dx) in pixels
    blur_map: np.ndarray  # (H, W) per-pixel Gaussian std in pixels
    noise_std: float
    seed: int | None = None

    @property
    def tilt_rms(self) -> float:
        return float(np.sqrt(np.mean(np.sum(self.tilt_field**2, axis=0))))

    @property
    def mean_sigma(self) -> float:
        return float(np.mean(self.blur_map))

    @classmethod
    def zero(cls, shape: tuple[int, int], d_r0: float = 0.5) -> DegradationParams:
        return cls(d_r0, np.zeros((2, *shape)), np.zeros(shape), 0.0)


def _random_field(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """White noise smoothed with a Gaussian of the correlation length, zero mean."""
    white = rng.standard_normal(shape)
    sigma = (0,) * (len(shape) - 2) + (CORRELATION_LENGTH, CORRELATION_LENGTH)
    field = gaussian_filter(white, sigma=sigma, mode="wrap")
    return field - field.mean(axis=(-2, -1), keepdims=True)


def sample_params(rng: np.random.Generator, d_r0_range=(0.5, 2.0), shape=(32, 32), seed: int | None = None) -> DegradationParams:
    lo, hi = d_r0_range
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid d_r0 range [{lo}, {hi}]")
    d_r0 = float(rng.uniform(lo, hi))
    tilt = _random_field(rng, (2, *shape))
    tilt *= UNIT_TILT_RMS / np.sqrt(np.mean(np.sum(tilt**2, axis=0)))
    g = _random_field(rng, shape)
    g /= g.std()
    blur = np.maximum(1.0 + 0.5 * g, 0.0)
    blur *= UNIT_BLUR_MEAN / blur.mean()
    return DegradationParams(
        d_r0=d_r0,
        tilt_field=d_r0 * tilt,
        blur_map=np.clip(d_r0 * blur, 0.0, SIGMA_MAX),
        noise_std=NOISE_STD,
        seed=seed,
    )


def warp(x: np.ndarray, tilt: np.ndarray) -> np.ndarray:
    """Sample ``x`` at p + tilt(p) with bilinear interpolation and edge clamping."""
    _, h, w = x.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    sy = np.clip(yy + tilt[0], 0, h - 1)
    sx = np.clip(xx + tilt[1], 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    # lerp form keeps constants exact
    top = x[:, y0, x0] + fx * (x[:, y0, x1] - x[:, y0, x0])
    bot = x[:, y1, x0] + fx * (x[:, y1, x1] - x[:, y1, x0])
    return top + fy * (bot - top)


def blur_weights(blur_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel normalized kernels as (offsets, weights[dy, dx, H, W]).

    Pixel p uses a Gaussian of std blur_map[p] truncated to |dy|, |dx| <=
    ceil(3 sigma); a zero std gives the unit impulse.
    """
    sig = np.asarray(blur_map, dtype=np.float64)
    rmax = math.ceil(3 * sig.max()) if sig.max() > 0 else 0
    radius = np.where(sig > 0, np.ceil(3 * sig), 0)
    safe = np.where(sig > 0, sig, 1.0)
    offsets = np.arange(-rmax, rmax + 1)
    dy = offsets[:, None, None, None]
    dx = offsets[None, :, None, None]
    wts = np.exp(-(dy**2 + dx**2) / (2 * safe**2))
    wts = np.where((np.abs(dy) <= radius) & (np.abs(dx) <= radius), wts, 0.0)
    wts /= wts.sum(axis=(0, 1), keepdims=True)
    return offsets, wts


def variant_blur(x: np.ndarray, blur_map: np.ndarray) -> np.ndarray:
    """Spatially variant Gaussian blur with edge-clamped neighbours.

    Evaluated as x[p] + sum_k w_p(k) (x[p+k] - x[p]) so constant images and
    zero-width kernels are exact fixed points.
    """
    _, h, w = x.shape
    offsets, wts = blur_weights(blur_map)
    rmax = int(offsets[-1])
    if rmax == 0:
        return x.copy()
    pad = np.pad(x, ((0, 0), (rmax, rmax), (rmax, rmax)), mode="edge")
    acc = np.zeros_like(x, dtype=np.float64)
    for i, dy in enumerate(offsets):
        for j, dx in enumerate(offsets):
            wk = wts[i, j]
            if (dy == 0 and dx == 0) or not wk.any():
                continue
            shifted = pad[:, rmax + dy : rmax + dy + h, rmax + dx : rmax + dx + w]
            acc += wk * (shifted - x)
    return x + acc


def degrade(x: np.ndarray, params: DegradationParams, rng: np.random.Generator | None = None) -> np.ndarray:
    """warp -> spatially variant blur -> additive noise -> clip to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or params.tilt_field.shape != (2, *x.shape[1:]) or params.blur_map.shape != x.shape[1:]:
        raise ValueError(f"degradation fields {params.tilt_field.shape}/{params.blur_map.shape} do not match image {x.shape}")
    y = warp(x, params.tilt_field)
    y = variant_blur(y, params.blur_map)
    if params.noise_std > 0:
        if rng is None:
            raise ValueError("degrade needs an rng when noise_std > 0")
        y = y + params.noise_std * rng.standard_normal(y.shape)
    return np.clip(y, -1.0, 1.0)


def phi_vector(params: DegradationParams) -> np.ndarray:
    """[d_r0, tilt RMS, mean blur sigma] min-max normalized into [0, 1]."""
    raw = np.array([params.d_r0, params.tilt_rms, params.mean_sigma])
    return np.clip((raw - PHI_LO) / (PHI_HI - PHI_LO), 0.0, 1.0)


def denormalize_phi(phi: np.ndarray) -> np.ndarray:
    return PHI_LO + np.asarray(phi) * (PHI_HI - PHI_LO)
