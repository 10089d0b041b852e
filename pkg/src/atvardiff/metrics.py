"""PSNR, SSIM, patch-Frechet distance, and dataset evaluation reports."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import PairedDataset

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = np.mean((a - b) ** 2)
    if err < 1e-10:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(data_range**2 / err)))


def to_gray(img: np.ndarray) -> np.ndarray:
    """CHW RGB -> HW luma; 2-D input passes through."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=1)
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    raise ValueError(f"expected CHW image, got shape {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 2.0, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all ``window`` x ``window`` windows of the luma images."""
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"ssim: image {a.shape} smaller than window {window}")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da * da).mean(axis=(-2, -1))
    var_b = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def sample_patches(images: np.ndarray, patch: int, n_patches: int, rng: np.random.Generator) -> np.ndarray:
    """Random ``patch`` x ``patch`` crops from (N, C, H, W) images, flattened."""
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    idx = rng.integers(0, n, n_patches)
    oy = rng.integers(0, h - patch + 1, n_patches)
    ox = rng.integers(0, w - patch + 1, n_patches)
    win = sliding_window_view(images, (patch, patch), axis=(2, 3))  # n, c, h', w', p, p
    return win[idx, :, oy, ox].reshape(n_patches, c * patch * patch)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)).

    The trace term uses the symmetric form sqrt(A) B sqrt(A); a failed
    eigendecomposition is retried once with a 1e-6 ridge.
    """

    def trace_sqrt(a, b):
        s = _sqrt_psd(a)
        vals = np.linalg.eigvalsh(s @ b @ s)
        if not np.all(np.isfinite(vals)):
            raise np.linalg.LinAlgError("non-finite eigenvalues")
        return np.sqrt(np.clip(vals, 0, None)).sum()

    try:
        tr = trace_sqrt(cov_a, cov_b)
    except np.linalg.LinAlgError:
        ridge = 1e-6 * np.eye(len(cov_a))
        tr = trace_sqrt(cov_a + ridge, cov_b + ridge)
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr, 0.0))


def patch_frechet(set_a: np.ndarray, set_b: np.ndarray, patch: int = 7, n_patches: int = 10_000, seed: int = 0) -> float:
    """Frechet distance between Gaussian fits of random raw patches of two image sets."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("patch_frechet needs non-empty image sets")
    pa = sample_patches(set_a, patch, n_patches, np.random.default_rng([seed, 0]))
    pb = sample_patches(set_b, patch, n_patches, np.random.default_rng([seed, 0]))
    return frechet_distance(pa.mean(0), np.cov(pa, rowvar=False), pb.mean(0), np.cov(pb, rowvar=False))


@dataclass
class MetricsReport:
    indices: list[int]
    psnr: list[float]
    ssim: list[float]
    patch_frechet: float
    input_psnr: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    restored: np.ndarray | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return len(self.indices)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def summary(self) -> dict:
        out = {
            "count": self.count,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "patch_frechet": self.patch_frechet,
        }
        if self.input_psnr:
            out["mean_input_psnr"] = float(np.mean(self.input_psnr))
        out.update({f"config.{k}": v for k, v in self.config.items()})
        return out

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"{i} {p:.6f} {s:.6f}" for i, p, s in zip(self.indices, self.psnr, self.ssim)]
        lines.append(f"# mean_psnr {self.mean_psnr:.6f} mean_ssim {self.mean_ssim:.6f} patch_frechet {self.patch_frechet:.6f}")
        (out / "report.txt").write_text("\n".join(lines) + "\n")
        (out / "summary.txt").write_text("".join(f"{k} = {v}\n" for k, v in self.summary().items()))


def evaluate(
    restore: Callable[[np.ndarray, Sequence[int]], np.ndarray],
    data: PairedDataset,
    seed: int = 0,
    batch: int = 50,
    workers: int = 1,
    patch: int = 7,
    n_patches: int = 10_000,
    config: dict | None = None,
) -> MetricsReport:
    """Restore every degraded image and score it against the clean one.

    ``restore(y_batch, indices)`` returns restored images for a batch; batches
    have fixed composition so results do not depend on ``workers``.
    """
    n = len(data)
    chunks = [list(range(s, min(n, s + batch))) for s in range(0, n, batch)]

    def run(chunk):
        return restore(data.degraded[chunk], [data.records[i].index for i in chunk])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        restored = np.concatenate(list(pool.map(run, chunks)), axis=0)
    report = MetricsReport(
        indices=[r.index for r in data.records],
        psnr=[psnr(restored[i], data.clean[i]) for i in range(n)],
        ssim=[ssim(restored[i], data.clean[i]) for i in range(n)],
        patch_frechet=patch_frechet(restored, data.clean, patch, n_patches, seed),
        input_psnr=[psnr(data.degraded[i], data.clean[i]) for i in range(n)],
        config=dict(config or {}),
        restored=restored,
    )
    return report
