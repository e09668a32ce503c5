"""PNG emission for predictions: probability maps, masks, and overlays."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import ShapeError

TINT = 120  # additive tint strength for overlay regions


def _to_hw(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeError(f"expected (H, W) or (1, H, W), got {arr.shape}")
    return arr


def save_prob_png(probs: np.ndarray, path) -> None:
    """Quantize probabilities as round(255 * p) into a grayscale PNG."""
    arr = np.round(255.0 * _to_hw(probs)).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_mask_png(mask: np.ndarray, path) -> None:
    """Binary mask as a black/white PNG."""
    arr = ((_to_hw(mask) != 0) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_overlay_png(image: np.ndarray, truth_mask, pred_mask, path) -> None:
    """Original image with truth tinted red and prediction tinted green.

    `image` is (3, H, W) with raw 0..255 values. Tinting is additive, so
    overlapping regions render yellow.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"overlay base must be (3, H, W), got {image.shape}")
    base = np.clip(image, 0, 255).transpose(1, 2, 0).astype(np.int16)
    if truth_mask is not None:
        base[..., 0] += (TINT * (_to_hw(truth_mask) != 0)).astype(np.int16)
    if pred_mask is not None:
        base[..., 1] += (TINT * (_to_hw(pred_mask) != 0)).astype(np.int16)
    Image.fromarray(np.clip(base, 0, 255).astype(np.uint8), mode="RGB").save(path)
