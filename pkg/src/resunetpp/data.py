"""Image/mask loading, preprocessing, dataset splitting, and epoch shuffling.

Pipeline order is fixed: load -> resize -> scale to [0, 1] -> standardize for
images; load (binarize at >127) -> nearest resize for masks, which keeps
masks exactly binary end to end. Masks are never standardized.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError, ValidationError

MASK_THRESHOLD = 127  # 8-bit mask values above this count as foreground


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (3, H, W) float
    mask: np.ndarray   # (1, H, W) binary float


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    split_seed: int = 0
    ratios: tuple = (0.70, 0.15, 0.15)


def load_image(path) -> np.ndarray:
    """Read an 8-bit PNG as (3, H, W) float32 with raw 0..255 values.

    Grayscale inputs are replicated to 3 channels.
    """
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_mask(path) -> np.ndarray:
    """Read an 8-bit single-channel PNG as raw (1, H, W) float32."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return arr[None, :, :].copy()


def load_pair(image_path, mask_path, sample_id: str | None = None) -> Sample:
    """Load one image/mask pair; the mask is binarized at >127.

    The id defaults to the image file stem; nested layouts pass the case
    directory name instead (every image there is called image.png).
    """
    image = load_image(image_path)
    raw_mask = load_mask(mask_path)
    if image.shape[1:] != raw_mask.shape[1:]:
        raise ValidationError(
            f"image {image.shape[1:]} and mask {raw_mask.shape[1:]} dims differ "
            f"for {image_path} / {mask_path}")
    mask = (raw_mask > MASK_THRESHOLD).astype(np.float32)
    return Sample(sample_id or Path(image_path).stem, image, mask)


def normalize01(image: np.ndarray) -> np.ndarray:
    """Scale 8-bit-origin values from [0, 255] to [0, 1]."""
    return np.asarray(image) / 255.0


def standardize(image: np.ndarray, stats=None) -> np.ndarray:
    """Zero-mean, unit-variance over all channels jointly (population std).

    `stats = (mean, std)` substitutes dataset-global statistics for the
    per-image ones. Constant images (std below 1e-8) map to zeros with a
    warning.
    """
    x = np.asarray(image, dtype=np.float64)
    if stats is None:
        mean = float(x.mean())
        std = float(x.std())
    else:
        mean, std = float(stats[0]), float(stats[1])
    if std < 1e-8:
        warnings.warn("standardize: constant image, returning zeros", RuntimeWarning)
        return np.zeros_like(np.asarray(image))
    return ((x - mean) / std).astype(np.asarray(image).dtype)


def _sample_positions(in_size: int, out_size: int) -> np.ndarray:
    # half-pixel-center source coordinate of each output pixel
    return (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5


def _linear_axis(arr: np.ndarray, out_size: int, axis: int) -> np.ndarray:
    in_size = arr.shape[axis]
    if in_size == out_size:
        return arr
    pos = _sample_positions(in_size, out_size)
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo  # in [0, 1); edges collapse via index clipping below
    lo0 = np.clip(lo, 0, in_size - 1)
    lo1 = np.clip(lo + 1, 0, in_size - 1)
    a = np.take(arr, lo0, axis=axis)
    b = np.take(arr, lo1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = out_size
    f = frac.reshape(shape).astype(arr.dtype)
    # a + f*(b - a) rather than a*(1-f) + b*f: keeps constant inputs exact
    return a + f * (b - a)


def resize(image: np.ndarray, target=(256, 256), mode: str = "bilinear") -> np.ndarray:
    """Resize (C, H, W) to (C, target_h, target_w).

    Bilinear uses the half-pixel-centers convention; nearest picks
    floor((j + 0.5) * in / out) and therefore preserves binary masks.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"resize expects (C, H, W), got {image.shape}")
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ValidationError(f"target size must be positive, got {target}")
    if mode == "bilinear":
        out = _linear_axis(_linear_axis(image, th, axis=1), tw, axis=2)
        return np.ascontiguousarray(out)
    if mode == "nearest":
        iy = np.clip((_sample_positions(image.shape[1], th) + 0.5).astype(np.int64),
                     0, image.shape[1] - 1)
        ix = np.clip((_sample_positions(image.shape[2], tw) + 0.5).astype(np.int64),
                     0, image.shape[2] - 1)
        return np.ascontiguousarray(image[:, iy][:, :, ix])
    raise ValidationError(f"unknown resize mode {mode!r}")


def prepare_sample(sample: Sample, target_size=(256, 256), stats=None) -> Sample:
    """Apply the full preprocessing chain to a freshly loaded sample."""
    image = resize(sample.image, target_size, mode="bilinear")
    mask = resize(sample.mask, target_size, mode="nearest")
    image = standardize(normalize01(image), stats=stats)
    return Sample(sample.id, image.astype(np.float32), mask.astype(np.float32))


def discover_pairs(root) -> list[tuple[str, Path, Path]]:
    """Find (id, image_path, mask_path) under either supported layout.

    Nested: <root>/<case>/image.png + <root>/<case>/mask.png.
    Flat:   <root>/<name>.png + <root>/<name>_mask.png.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"data directory not found: {root}")
    pairs = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        img, msk = sub / "image.png", sub / "mask.png"
        if img.is_file() and msk.is_file():
            pairs.append((sub.name, img, msk))
    if pairs:
        return pairs
    for msk in sorted(root.glob("*_mask.png")):
        img = msk.with_name(msk.name[:-len("_mask.png")] + ".png")
        if img.is_file():
            pairs.append((img.stem, img, msk))
    if not pairs:
        raise ValidationError(f"no image/mask pairs found under {root}")
    return pairs


def load_dataset(root, target_size=(256, 256), standardize_mode: str = "per_image") -> list[Sample]:
    """Load and preprocess every pair under `root`."""
    pairs = discover_pairs(root)
    raw = [load_pair(img, msk, sample_id=pid) for pid, img, msk in pairs]
    stats = None
    if standardize_mode == "global":
        scaled = [normalize01(resize(s.image, target_size)) for s in raw]
        stacked = np.concatenate([s.reshape(-1) for s in scaled])
        stats = (float(stacked.mean()), float(stacked.std()))
    elif standardize_mode != "per_image":
        raise ValidationError(f"unknown standardize mode {standardize_mode!r}")
    return [prepare_sample(s, target_size, stats=stats) for s in raw]


def split(samples, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Deterministic shuffled partition into train/val/test.

    Val and test sizes are floor(n * ratio); the remainder goes to train.
    """
    n = len(samples)
    if n < 3:
        raise ValidationError(f"need at least 3 samples to split, got {n}")
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must be three positives summing to 1, got {ratios}")
    n_val = int(math.floor(n * ratios[1] + 1e-9))
    n_test = int(math.floor(n * ratios[2] + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    n_train = n - n_val - n_test
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train:n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    return DatasetSplit(train, val, test, split_seed=seed, ratios=tuple(ratios))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Deterministic per-epoch generator derived by hashing (seed, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def shuffle_epoch(samples, seed: int, epoch: int) -> list:
    """Deterministic per-epoch permutation of the sample list."""
    order = epoch_rng(seed, epoch).permutation(len(samples))
    return [samples[i] for i in order]
