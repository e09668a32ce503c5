"""Adam-family optimizers and learning-rate policies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError, ValidationError

# minimum val-loss improvement that counts against a plateau
IMPROVE_DELTA = 1e-4


@dataclass
class LRSchedule:
    initial_lr: float
    decay_factor: float = 0.5
    cycle_length_epochs: int = 6
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    min_lr: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.decay_factor < 1.0 or not 0.0 < self.plateau_factor < 1.0:
            raise ValidationError("decay factors must lie in (0, 1)")
        if self.min_lr <= 0 or self.initial_lr <= 0:
            raise ValidationError("learning rates must be positive")
        if self.cycle_length_epochs < 1 or self.plateau_patience < 1:
            raise ValidationError("cycle length and patience must be >= 1")


def schedule_lr(schedule: LRSchedule, epoch: int) -> float:
    """Step decay: initial * factor^(epoch // cycle_length), floored at min_lr."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    lr = schedule.initial_lr * schedule.decay_factor ** (epoch // schedule.cycle_length_epochs)
    return max(lr, schedule.min_lr)


def reduce_on_plateau(schedule: LRSchedule, val_loss_history) -> float:
    """Multiplier for the current lr given the val-loss history so far.

    Returns the plateau factor exactly when the newest entry completes a run
    of `plateau_patience` epochs without the best loss improving by at least
    IMPROVE_DELTA; the stall counter resets after each reduction.
    """
    if not val_loss_history:
        raise ValidationError("val loss history must be nonempty")
    best = val_loss_history[0]
    stall = 0
    for i, v in enumerate(list(val_loss_history)[1:], start=1):
        if best - v >= IMPROVE_DELTA:
            best = v
            stall = 0
            continue
        stall += 1
        if stall >= schedule.plateau_patience:
            stall = 0
            if i == len(val_loss_history) - 1:
                return schedule.plateau_factor
    return 1.0


class MomentOptimizer:
    """Adam / NAdam over an ordered list of (name, Variable) parameters.

    Both track bias-corrected first and second moments of the gradients;
    NAdam replaces the first-moment numerator with a Nesterov look-ahead:
    beta1 * m_t / (1 - beta1^(t+1)) + (1 - beta1) * g / (1 - beta1^t).
    With beta1 = 0 the two updates coincide exactly.
    """

    def __init__(self, params, kind: str = "nadam", lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("adam", "nadam"):
            raise ValidationError(f"optimizer kind must be 'adam' or 'nadam', got {kind!r}")
        self.params = list(params)
        names = [name for name, _ in self.params]
        if len(set(names)) != len(names):
            raise ValidationError("parameter names must be unique")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in self.params}
        self.v = {name: np.zeros_like(p.value) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        """Apply one update from the gradients currently stored on the params."""
        self.t += 1
        t = self.t
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        bc1_next = 1.0 - b1 ** (t + 1)
        for name, p in self.params:
            if p.grad is None:
                raise UsageError(f"parameter {name!r} has no gradient; run backward first")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.kind == "adam":
                num = m / bc1
            else:
                num = b1 * (m / bc1_next) + (1.0 - b1) * (g / bc1)
            p.value -= self.lr * num / (np.sqrt(v / bc2) + self.eps)
