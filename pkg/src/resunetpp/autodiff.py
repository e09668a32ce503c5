"""Reverse-mode automatic differentiation over the tensor kernels.

A `Tape` records one forward pass (define-by-run); `Tape.backward` walks the
recorded ops once, in reverse creation order, accumulating gradients into
every `Variable` that requires them. Tapes are rebuilt for every forward
pass, which keeps mode-dependent layers (batch norm) trivially correct.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError


class Variable:
    """A tensor value plus its gradient slot.

    Variables are created freestanding (trainable parameters, which persist
    across steps) or directly on a tape (activations). `Tape.attach` enlists
    a freestanding Variable into the current graph.
    """

    __slots__ = ("value", "grad", "requires_grad", "tape", "node_id")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape = None
        self.node_id = -1

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Variable(shape={self.value.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "kind", "input_ids", "backward")

    def __init__(self, out, kind, input_ids, backward):
        self.out = out
        self.kind = kind
        self.input_ids = input_ids
        self.backward = backward


class Tape:
    """Ordered record of one forward pass.

    Creation order is topological by construction: every input of a node is
    attached or recorded before the node itself. `len(tape)` counts recorded
    ops; leaves receive node ids but are never replayed.
    """

    def __init__(self, grad_enabled: bool = True):
        self.nodes: list[_Node] = []
        self.grad_enabled = grad_enabled
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, value, requires_grad: bool = False) -> Variable:
        return self.attach(Variable(value, requires_grad))

    def attach(self, var: Variable) -> Variable:
        """Enlist a Variable as a leaf of this tape (idempotent per tape)."""
        if var.tape is self:
            return var
        var.tape = self
        var.node_id = self._new_id()
        return var

    def record(self, kind: str, inputs, value, backward) -> Variable:
        """Register an op whose forward value was computed eagerly.

        `backward(grad_out)` must accumulate into the inputs' grads; it is
        dropped when no input requires a gradient or when the tape has
        gradients disabled.
        """
        for v in inputs:
            if v.tape is not self:
                raise UsageError(f"input of {kind!r} belongs to a different tape")
        out = Variable(value, requires_grad=any(v.requires_grad for v in inputs))
        out.tape = self
        out.node_id = self._new_id()
        if self.grad_enabled:
            fn = backward if out.requires_grad else None
            self.nodes.append(_Node(out, kind, tuple(v.node_id for v in inputs), fn))
        return out

    def backward(self, root: Variable) -> None:
        """Accumulate d(root)/d(leaf) into every requiring Variable's grad."""
        if root.tape is not self:
            raise UsageError("backward root lives on a different tape")
        if not self.grad_enabled:
            raise UsageError("tape was created with gradients disabled")
        if root.value.size != 1:
            raise UsageError(f"backward root must be scalar, got shape {root.value.shape}")
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.out.node_id > root.node_id:
                continue
            if node.backward is None or node.out.grad is None:
                continue
            node.backward(node.out.grad)


def accumulate(var: Variable, grad) -> None:
    """Add `grad` into var.grad; no-op for variables that don't require it."""
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.array(grad, dtype=var.value.dtype)
    else:
        var.grad += grad


def _same_tape(*variables) -> Tape:
    tape = variables[0].tape
    if tape is None:
        raise UsageError("variable is not attached to a tape")
    for v in variables[1:]:
        if v.tape is not tape:
            raise UsageError("variables belong to different tapes")
    return tape


def constant(tape: Tape, value, dtype=None) -> Variable:
    arr = np.asarray(value) if dtype is None else np.asarray(value, dtype=dtype)
    return tape.leaf(arr, requires_grad=False)


def _reduce_like(grad: np.ndarray, var: Variable) -> np.ndarray:
    # undo the per-channel broadcast when the operand was rank-1
    if grad.shape == var.value.shape:
        return grad
    return grad.sum(axis=(0, 2, 3))


def add(a: Variable, b: Variable) -> Variable:
    tape = _same_tape(a, b)
    out = T.broadcast_binary("add", a.value, b.value)

    def backward(g):
        accumulate(a, g)
        accumulate(b, _reduce_like(g, b))

    return tape.record("add", (a, b), out, backward)


def sub(a: Variable, b: Variable) -> Variable:
    tape = _same_tape(a, b)
    out = T.broadcast_binary("sub", a.value, b.value)

    def backward(g):
        accumulate(a, g)
        accumulate(b, -_reduce_like(g, b))

    return tape.record("sub", (a, b), out, backward)


def mul(a: Variable, b: Variable) -> Variable:
    tape = _same_tape(a, b)
    out = T.broadcast_binary("mul", a.value, b.value)
    bb = T.align_operand(a.value, b.value)

    def backward(g):
        accumulate(a, g * bb)
        accumulate(b, _reduce_like(g * a.value, b))

    return tape.record("mul", (a, b), out, backward)


def div(a: Variable, b: Variable) -> Variable:
    tape = _same_tape(a, b)
    out = T.broadcast_binary("div", a.value, b.value)
    bb = T.align_operand(a.value, b.value)

    def backward(g):
        accumulate(a, g / bb)
        accumulate(b, _reduce_like(-g * a.value / (bb * bb), b))

    return tape.record("div", (a, b), out, backward)


def relu(x: Variable) -> Variable:
    tape = _same_tape(x)
    out = T.map_unary("relu", x.value)
    mask = x.value > 0  # subgradient 0 at exactly 0

    def backward(g):
        accumulate(x, g * mask)

    return tape.record("relu", (x,), out, backward)


def sigmoid(x: Variable) -> Variable:
    tape = _same_tape(x)
    out = T.map_unary("sigmoid", x.value)

    def backward(g):
        accumulate(x, g * out * (1.0 - out))

    return tape.record("sigmoid", (x,), out, backward)


def neg(x: Variable) -> Variable:
    tape = _same_tape(x)

    def backward(g):
        accumulate(x, -g)

    return tape.record("neg", (x,), T.map_unary("neg", x.value), backward)


def exp(x: Variable) -> Variable:
    tape = _same_tape(x)
    out = T.map_unary("exp", x.value)

    def backward(g):
        accumulate(x, g * out)

    return tape.record("exp", (x,), out, backward)


def log(x: Variable) -> Variable:
    tape = _same_tape(x)
    out = T.map_unary("log", x.value)

    def backward(g):
        accumulate(x, g / x.value)

    return tape.record("log", (x,), out, backward)


def square(x: Variable) -> Variable:
    tape = _same_tape(x)

    def backward(g):
        accumulate(x, 2.0 * x.value * g)

    return tape.record("square", (x,), T.map_unary("square", x.value), backward)


def _restore_dims(g: np.ndarray, axes, keepdims: bool) -> np.ndarray:
    return g if keepdims else np.expand_dims(g, axes)


def reduce_sum(x: Variable, axes=None, keepdims: bool = False) -> Variable:
    tape = _same_tape(x)
    out = T.reduce("sum", x.value, axes, keepdims)
    ax = T.normalize_axes(axes, x.value.ndim)
    shape = x.value.shape

    def backward(g):
        accumulate(x, np.broadcast_to(_restore_dims(g, ax, keepdims), shape))

    return tape.record("reduce_sum", (x,), out, backward)


def reduce_mean(x: Variable, axes=None, keepdims: bool = False) -> Variable:
    tape = _same_tape(x)
    out = T.reduce("mean", x.value, axes, keepdims)
    ax = T.normalize_axes(axes, x.value.ndim)
    shape = x.value.shape
    count = 1
    for a in ax:
        count *= shape[a]

    def backward(g):
        accumulate(x, np.broadcast_to(_restore_dims(g, ax, keepdims) / count, shape))

    return tape.record("reduce_mean", (x,), out, backward)


def reduce_max(x: Variable, axes=None, keepdims: bool = False) -> Variable:
    tape = _same_tape(x)
    out = T.reduce("max", x.value, axes, keepdims)
    ax = T.normalize_axes(axes, x.value.ndim)
    ndim = x.value.ndim
    k = len(ax)
    # collapse the reduced axes to one trailing axis; argmax then gives the
    # first maximum in row-major scan order over those axes
    moved = np.moveaxis(x.value, ax, range(ndim - k, ndim))
    kept_shape = moved.shape[:ndim - k]
    flat = moved.reshape(kept_shape + (-1,))
    idx = flat.argmax(axis=-1)

    def backward(g):
        gk = np.squeeze(g, axis=ax) if keepdims else g
        buf = np.zeros_like(flat)
        np.put_along_axis(buf, idx[..., None], np.asarray(gk)[..., None], axis=-1)
        accumulate(x, np.moveaxis(buf.reshape(moved.shape), range(ndim - k, ndim), ax))

    return tape.record("reduce_max", (x,), out, backward)


def conv2d(x: Variable, weight: Variable, bias, spec: T.ConvSpec) -> Variable:
    inputs = (x, weight) if bias is None else (x, weight, bias)
    tape = _same_tape(*inputs)
    out = T.conv2d(x.value, weight.value, None if bias is None else bias.value, spec)

    def backward(g):
        gx, gw = T.conv2d_grads(x.value, weight.value, spec, g,
                                need_x=x.requires_grad, need_w=weight.requires_grad)
        if gx is not None:
            accumulate(x, gx)
        if gw is not None:
            accumulate(weight, gw)
        if bias is not None:
            accumulate(bias, g.sum(axis=(0, 2, 3)))

    return tape.record("conv2d", inputs, out, backward)


def maxpool2d(x: Variable, window: int = 2) -> Variable:
    tape = _same_tape(x)
    out, idx = T.maxpool2d(x.value, window)
    shape = x.value.shape

    def backward(g):
        accumulate(x, T.maxpool2d_grad(shape, window, idx, g))

    return tape.record("maxpool2d", (x,), out, backward)


def upsample2d(x: Variable, factor: int = 2) -> Variable:
    tape = _same_tape(x)
    out = T.upsample2d(x.value, factor)

    def backward(g):
        accumulate(x, T.upsample2d_grad(factor, g))

    return tape.record("upsample2d", (x,), out, backward)


def concat_channels(a: Variable, b: Variable) -> Variable:
    tape = _same_tape(a, b)
    out = T.concat_channels(a.value, b.value)
    ca = a.value.shape[1]

    def backward(g):
        accumulate(a, g[:, :ca])
        accumulate(b, g[:, ca:])

    return tape.record("concat_channels", (a, b), out, backward)


def scale_channels(x: Variable, alpha: Variable) -> Variable:
    """Multiply every channel of NCHW `x` by a shared (N, 1, H, W) map."""
    tape = _same_tape(x, alpha)
    xs, als = x.value.shape, alpha.value.shape
    if x.value.ndim != 4 or alpha.value.ndim != 4 or als[1] != 1 \
            or xs[0] != als[0] or xs[2:] != als[2:]:
        raise ShapeError(f"cannot scale channels of {xs} by map {als}")
    out = x.value * alpha.value

    def backward(g):
        accumulate(x, g * alpha.value)
        accumulate(alpha, (g * x.value).sum(axis=1, keepdims=True))

    return tape.record("scale_channels", (x, alpha), out, backward)


def grad_check(f, wrt: Variable, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of the scalar graph builder `f` with respect to `wrt`.

    `f` must build a fresh graph (its own tape) on every call and read
    `wrt.value` at call time. Runs in f64; the per-coordinate error is
    |a - n| / max(|a|, |n|, 1e-8) and the max over coordinates is returned.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise UsageError(f"grad_check eps {eps} outside [1e-6, 1e-3]")
    if wrt.value.dtype != np.float64:
        raise UsageError("grad_check requires an f64 variable")
    if not wrt.requires_grad:
        raise UsageError("grad_check target must require gradients")
    wrt.grad = None
    out = f()
    out.tape.backward(out)
    analytic = (np.zeros_like(wrt.value) if wrt.grad is None
                else np.array(wrt.grad, dtype=np.float64))
    flat = wrt.value.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f().value.item()
        flat[i] = orig - eps
        lo = f().value.item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(wrt.value.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
