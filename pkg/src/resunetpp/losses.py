"""Training loss and evaluation metrics for binary segmentation masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class LossConfig:
    smooth_eps: float = 1e-7
    binarize_threshold: float = 0.5
    per_sample: bool = False

    def __post_init__(self):
        if self.smooth_eps <= 0:
            raise ValidationError("smooth_eps must be positive")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValidationError("binarize_threshold must lie in (0, 1)")


def _check_binary(target: np.ndarray, what: str = "target") -> None:
    if not np.all((target == 0) | (target == 1)):
        raise ValidationError(f"{what} mask must contain only 0 and 1")


def jaccard_loss(pred: Variable, target, cfg: LossConfig = LossConfig()) -> Variable:
    """Differentiable 1 - soft IoU between probabilities and a binary mask.

    The intersection and union are probability-weighted sums over the whole
    batch (a single global ratio), smoothed by `cfg.smooth_eps` in numerator
    and denominator so that empty-vs-empty scores a perfect 0 loss. With
    `cfg.per_sample`, per-sample ratios are averaged instead.
    """
    tape = pred.tape
    tv = target.value if isinstance(target, Variable) else np.asarray(target)
    if tv.shape != pred.value.shape:
        raise ShapeError(f"prediction {pred.value.shape} vs target {tv.shape}")
    _check_binary(tv)
    t = target if isinstance(target, Variable) \
        else tape.leaf(np.asarray(tv, dtype=pred.value.dtype))

    dt = pred.value.dtype
    if cfg.per_sample:
        axes = tuple(range(1, pred.value.ndim))
        n = pred.value.shape[0]
        eps = ad.constant(tape, np.full(n, cfg.smooth_eps, dtype=dt))
        one = ad.constant(tape, np.ones(n, dtype=dt))
        inter = ad.reduce_sum(ad.mul(pred, t), axes)
        union = ad.sub(ad.add(ad.reduce_sum(pred, axes), ad.reduce_sum(t, axes)), inter)
        losses = ad.sub(one, ad.div(ad.add(inter, eps), ad.add(union, eps)))
        return ad.reduce_mean(losses)

    eps = ad.constant(tape, np.asarray(cfg.smooth_eps, dtype=dt))
    one = ad.constant(tape, np.asarray(1.0, dtype=dt))
    inter = ad.reduce_sum(ad.mul(pred, t))
    union = ad.sub(ad.add(ad.reduce_sum(pred), ad.reduce_sum(t)), inter)
    return ad.sub(one, ad.div(ad.add(inter, eps), ad.add(union, eps)))


def soft_jaccard_index(pred: np.ndarray, target: np.ndarray,
                       smooth_eps: float = 1e-7) -> float:
    """Probability-weighted IoU; complements jaccard_loss exactly."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    _check_binary(target)
    inter = (pred * target.astype(pred.dtype)).sum()
    union = pred.sum() + target.sum(dtype=pred.dtype) - inter
    return float((inter + smooth_eps) / (union + smooth_eps))


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strictly-greater thresholding to a {0, 1} mask of the same dtype."""
    probs = np.asarray(probs)
    return (probs > threshold).astype(probs.dtype)


def jaccard_index(pred_bin: np.ndarray, target: np.ndarray) -> float:
    """|A & B| / |A | B| over binary masks; empty vs empty counts as 1.0."""
    pred_bin = np.asarray(pred_bin)
    target = np.asarray(target)
    if pred_bin.shape != target.shape:
        raise ShapeError(f"prediction {pred_bin.shape} vs target {target.shape}")
    _check_binary(pred_bin, "prediction")
    _check_binary(target)
    a = pred_bin != 0
    b = target != 0
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return float(np.count_nonzero(a & b) / union)


def dice_coefficient(pred_bin: np.ndarray, target: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); empty vs empty counts as 1.0."""
    pred_bin = np.asarray(pred_bin)
    target = np.asarray(target)
    if pred_bin.shape != target.shape:
        raise ShapeError(f"prediction {pred_bin.shape} vs target {target.shape}")
    _check_binary(pred_bin, "prediction")
    _check_binary(target)
    a = pred_bin != 0
    b = target != 0
    denom = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if denom == 0:
        return 1.0
    return float(2.0 * np.count_nonzero(a & b) / denom)


def pixel_accuracy(pred_bin: np.ndarray, target: np.ndarray) -> float:
    """Fraction of pixels where the binary masks agree."""
    pred_bin = np.asarray(pred_bin)
    target = np.asarray(target)
    if pred_bin.shape != target.shape:
        raise ShapeError(f"prediction {pred_bin.shape} vs target {target.shape}")
    return float(np.mean((pred_bin != 0) == (target != 0)))
