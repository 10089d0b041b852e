"""Image I/O, procedural clean images, and on-disk paired datasets.

Dataset layout::

    out_dir/manifest.txt      index d_r0 tilt_rms mean_sigma noise_std seed
    out_dir/clean/%06d.png    8-bit RGB
    out_dir/degraded/%06d.png 8-bit RGB
    out_dir/phi/%06d.txt      three floats, one per line
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import turbulence

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class DatasetError(RuntimeError):
    pass


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 HWC -> float CHW in [-1, 1]."""
    return img.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    """float CHW in [-1, 1] -> uint8 HWC."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path, img: np.ndarray) -> None:
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def record_rng(seed: int, index: int) -> tuple[int, np.random.Generator]:
    """Independent per-record stream; the returned integer seeds it."""
    rseed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
    return rseed, np.random.default_rng(rseed)


def procedural_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Sharp-edged synthetic scene: gradient background plus random shapes."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, c1 = rng.uniform(0, 255, (2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    img = c0 + (c1 - c0) * ramp[..., None]
    for _ in range(rng.integers(3, 7)):
        colour = rng.uniform(0, 255, 3)
        kind = rng.integers(3)
        if kind == 0:
            y0, x0 = rng.uniform(-0.2, 0.8, 2)
            hgt, wid = rng.uniform(0.15, 0.6, 2)
            mask = (yy >= y0) & (yy < y0 + hgt) & (xx >= x0) & (xx < x0 + wid)
        elif kind == 1:
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.1, 0.35)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            theta = rng.uniform(0, np.pi)
            period = rng.uniform(0.15, 0.4)
            phase = np.cos(theta) * xx + np.sin(theta) * yy
            mask = (np.mod(phase / period, 1.0) < 0.5) & ((yy - 0.5) ** 2 + (xx - 0.5) ** 2 < rng.uniform(0.05, 0.2))
        img[mask] = colour
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _list_sources(clean_dir) -> list[Path]:
    d = Path(clean_dir)
    if not d.is_dir():
        raise DatasetError(f"clean image directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no readable images in {d}")
    return files


@dataclass
class Record:
    index: int
    d_r0: float
    tilt_rms: float
    mean_sigma: float
    noise_std: float
    seed: int

    def line(self) -> str:
        return f"{self.index} {self.d_r0:.9f} {self.tilt_rms:.9f} {self.mean_sigma:.9f} {self.noise_std:.9f} {self.seed}"


def make_pair(clean: np.ndarray, seed: int, index: int, d_r0_range, crop: int):
    """Crop a clean uint8 image and degrade it. Returns (clean8, degraded8, phi, record)."""
    rseed, rng = record_rng(seed, index)
    h, w = clean.shape[:2]
    oy = int(rng.integers(0, h - crop + 1))
    ox = int(rng.integers(0, w - crop + 1))
    clean8 = np.ascontiguousarray(clean[oy : oy + crop, ox : ox + crop])
    params = turbulence.sample_params(rng, d_r0_range, (crop, crop), seed=rseed)
    y = turbulence.degrade(to_float(clean8), params, rng)
    rec = Record(index, params.d_r0, params.tilt_rms, params.mean_sigma, params.noise_std, rseed)
    return clean8, to_uint8(y), turbulence.phi_vector(params), rec


def build_dataset(
    clean_dir,
    out_dir,
    n_pairs: int,
    d_r0_range=(0.5, 2.0),
    crop: int = 32,
    seed: int = 0,
    workers: int = 1,
    procedural: int = 0,
) -> list[Record]:
    """Write ``n_pairs`` (clean, degraded, phi) records under ``out_dir``.

    Record ``i`` uses source image ``i mod n_sources``. With ``procedural > 0``
    that many synthetic scenes of size ``crop`` are used as sources instead of
    ``clean_dir``. Output bytes depend only on the arguments, not ``workers``.
    """
    if n_pairs < 1:
        raise DatasetError("n_pairs must be positive")
    if d_r0_range[1] < d_r0_range[0]:
        raise DatasetError(f"invalid d_r0 range {d_r0_range}")
    if procedural > 0:
        src_rng = np.random.default_rng([seed, 0xC1EA])
        sources = [procedural_image(src_rng, crop) for _ in range(procedural)]
        load = sources.__getitem__
        n_src = len(sources)
    else:
        files = _list_sources(clean_dir)
        n_src = len(files)
        for f in files[: min(n_src, n_pairs)]:
            h, w = read_image(f).shape[:2]
            if h < crop or w < crop:
                raise DatasetError(f"source image {f} is {h}x{w}, smaller than crop {crop}")
        load = lambda i: read_image(files[i])  # noqa: E731

    out = Path(out_dir)
    for sub in ("clean", "degraded", "phi"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    def work(i: int) -> Record:
        clean8, deg8, phi, rec = make_pair(load(i % n_src), seed, i, d_r0_range, crop)
        write_image(out / "clean" / f"{i:06d}.png", clean8)
        write_image(out / "degraded" / f"{i:06d}.png", deg8)
        (out / "phi" / f"{i:06d}.txt").write_text("".join(f"{v:.9f}\n" for v in phi))
        return rec

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(work, range(n_pairs)))
    tmp = out / "manifest.txt.tmp"
    tmp.write_text("".join(r.line() + "\n" for r in records))
    os.replace(tmp, out / "manifest.txt")
    log.info("wrote %d pairs to %s", n_pairs, out)
    return records


def read_manifest(dataset_dir) -> list[Record]:
    path = Path(dataset_dir) / "manifest.txt"
    if not path.is_file():
        raise DatasetError(f"no manifest at {path}")
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        i, d, t, m, n, s = line.split()
        records.append(Record(int(i), float(d), float(t), float(m), float(n), int(s)))
    return records


@dataclass
class PairedDataset:
    """In-memory float arrays: clean/degraded (N, 3, H, W) in [-1, 1], phi (N, 3)."""

    clean: np.ndarray
    degraded: np.ndarray
    phi: np.ndarray
    records: list[Record]

    def __len__(self) -> int:
        return len(self.records)


def load_dataset(dataset_dir, limit: int | None = None) -> PairedDataset:
    d = Path(dataset_dir)
    records = read_manifest(d)
    if limit is not None:
        records = records[:limit]
    clean = np.stack([to_float(read_image(d / "clean" / f"{r.index:06d}.png")) for r in records])
    degraded = np.stack([to_float(read_image(d / "degraded" / f"{r.index:06d}.png")) for r in records])
    phi = np.stack([np.loadtxt(d / "phi" / f"{r.index:06d}.txt") for r in records])
    return PairedDataset(clean, degraded, phi, records)
