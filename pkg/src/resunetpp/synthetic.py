"""Synthetic blob dataset for smoke tests and the desk-scale training proof."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import Sample, standardize


def make_blob_dataset(count: int = 8, size: int = 64, seed: int = 0,
                      noise: float = 0.15) -> list[Sample]:
    """Bright gaussian blob on noise; the mask is the blob's support.

    Images come out standardized (as the preprocessing pipeline would leave
    them), masks are exact {0, 1}.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    samples = []
    for i in range(count):
        cy = rng.uniform(0.3 * size, 0.7 * size)
        cx = rng.uniform(0.3 * size, 0.7 * size)
        sig = rng.uniform(size / 10.0, size / 6.0)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sig * sig))
        mask = (bump > 0.5).astype(np.float32)[None]
        image = rng.normal(0.0, noise, (3, size, size)) + bump[None]
        image = standardize(image.astype(np.float32))
        samples.append(Sample(f"blob{i:03d}", image, mask))
    return samples


def write_blob_dataset(root, count: int = 8, size: int = 64, seed: int = 0) -> Path:
    """Write a nested-layout PNG tree of blob samples (for CLI runs)."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(count):
        cy = rng.uniform(0.3 * size, 0.7 * size)
        cx = rng.uniform(0.3 * size, 0.7 * size)
        sig = rng.uniform(size / 10.0, size / 6.0)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sig * sig))
        noise = rng.normal(0.0, 0.15, (size, size, 3))
        raw = noise + bump[:, :, None]
        lo, hi = raw.min(), raw.max()
        img8 = np.round(255.0 * (raw - lo) / (hi - lo)).astype(np.uint8)
        mask8 = ((bump > 0.5) * 255).astype(np.uint8)
        case = root / f"blob{i:03d}"
        case.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img8, mode="RGB").save(case / "image.png")
        Image.fromarray(mask8, mode="L").save(case / "mask.png")
    return root
