"""Dense float tensor kernels.

Every function here is pure: inputs are never modified and results are
freshly allocated. Image tensors use the NCHW layout (batch, channels,
height, width), row-major. f32 is the working precision; the verification
tooling runs the same kernels in f64. Reductions rely on numpy's fixed
pairwise summation, so identical inputs give bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

UNARY_OPS = ("relu", "sigmoid", "neg", "exp", "log", "square")
BINARY_OPS = ("add", "sub", "mul", "div")
REDUCE_OPS = ("sum", "mean", "max")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d cross-correlation (no kernel flip)."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.dilation) < 1:
            raise ShapeError(f"kernel/stride/dilation must be >= 1, got {self}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self}")

    def output_dim(self, size: int, kernel: int) -> int:
        span = self.dilation * (kernel - 1) + 1
        out = (size + 2 * self.padding - span) // self.stride + 1
        if out < 1:
            raise ShapeError(
                f"convolution output collapses to {out} for input dim {size} with {self}"
            )
        return out

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return self.output_dim(h, self.kernel_h), self.output_dim(w, self.kernel_w)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def map_unary(op: str, x: np.ndarray) -> np.ndarray:
    """Elementwise relu/sigmoid/neg/exp/log/square; log rejects entries <= 0."""
    if op == "relu":
        return np.maximum(x, 0)
    if op == "sigmoid":
        return _sigmoid(x)
    if op == "neg":
        return -x
    if op == "exp":
        return np.exp(x)
    if op == "log":
        bad = np.flatnonzero(x <= 0)
        if bad.size:
            raise DomainError(f"log of non-positive entry at flat index {bad[0]}")
        return np.log(x)
    if op == "square":
        return x * x
    raise ValueError(f"unknown unary op {op!r}")


def align_operand(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Validate the two supported operand layouts and reshape `b` for numpy.

    Accepted: identical shapes, or rank-1 `b` of length C against a rank-4
    NCHW `a` (per-channel bias broadcast).
    """
    if a.shape == b.shape:
        return b
    if a.ndim == 4 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return b.reshape(1, -1, 1, 1)
    raise ShapeError(f"cannot broadcast operand {b.shape} against {a.shape}")


def broadcast_binary(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise add/sub/mul/div with the channel-bias broadcast rule."""
    bb = align_operand(a, b)
    if op == "add":
        return a + bb
    if op == "sub":
        return a - bb
    if op == "mul":
        return a * bb
    if op == "div":
        if np.any(bb == 0):
            raise DomainError("division by zero")
        return a / bb
    raise ValueError(f"unknown binary op {op!r}")


def normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    out = []
    for a in axes:
        a = int(a)
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank-{ndim} tensor")
        out.append(a % ndim)
    return tuple(out)


def reduce(op: str, x: np.ndarray, axes=None, keepdims: bool = False) -> np.ndarray:
    """sum/mean/max over `axes` (all axes when None)."""
    ax = normalize_axes(axes, x.ndim)
    for a in ax:
        if x.shape[a] == 0:
            raise DomainError(f"cannot reduce over empty axis {a}")
    if op == "sum":
        return x.sum(axis=ax, keepdims=keepdims)
    if op == "mean":
        return x.mean(axis=ax, keepdims=keepdims)
    if op == "max":
        return x.max(axis=ax, keepdims=keepdims)
    raise ValueError(f"unknown reduce op {op!r}")


def _require_nchw(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 NCHW, got shape {x.shape}")


def _padded(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _window_view(xp: np.ndarray, spec: ConvSpec, h_out: int, w_out: int) -> np.ndarray:
    # zero-copy dilated sliding windows: (N, C, H_out, W_out, kh, kw)
    sn, sc, sh, sw = xp.strides
    shape = (xp.shape[0], xp.shape[1], h_out, w_out, spec.kernel_h, spec.kernel_w)
    strides = (sn, sc, spec.stride * sh, spec.stride * sw,
               spec.dilation * sh, spec.dilation * sw)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides,
                                           writeable=False)


def _check_conv_args(x, weight, bias, spec: ConvSpec) -> None:
    _require_nchw(x, "conv input")
    _require_nchw(weight, "conv weight")
    if weight.shape[2:] != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"weight kernel {weight.shape[2:]} does not match spec "
            f"({spec.kernel_h}, {spec.kernel_w})"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"bias shape {bias.shape} does not match {weight.shape[0]} output channels"
        )


def conv2d(x: np.ndarray, weight: np.ndarray, bias, spec: ConvSpec) -> np.ndarray:
    """Cross-correlation via im2col and one matmul per image (production path).

    The matmul runs per image, not over the stacked batch, so each sample's
    result is bitwise identical whether it is processed alone or batched.
    """
    _check_conv_args(x, weight, bias, spec)
    n = x.shape[0]
    c_out = weight.shape[0]
    h_out, w_out = spec.output_hw(x.shape[2], x.shape[3])
    view = _window_view(_padded(x, spec.padding), spec, h_out, w_out)
    w_mat = weight.reshape(c_out, -1).T
    out = np.empty((n, h_out * w_out, c_out), dtype=x.dtype)
    for i in range(n):
        cols = view[i].transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, -1)
        out[i] = cols @ w_mat
    out = out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_naive(x: np.ndarray, weight: np.ndarray, bias, spec: ConvSpec) -> np.ndarray:
    """Direct per-output-pixel evaluation of the definition (oracle path).

    Each output element is accumulated in f64 regardless of the input dtype,
    so the reference is tighter than the matmul path it cross-checks.
    """
    _check_conv_args(x, weight, bias, spec)
    n = x.shape[0]
    c_out = weight.shape[0]
    h_out, w_out = spec.output_hw(x.shape[2], x.shape[3])
    xp = _padded(x, spec.padding)
    span_h = spec.dilation * (spec.kernel_h - 1) + 1
    span_w = spec.dilation * (spec.kernel_w - 1) + 1
    out = np.zeros((n, c_out, h_out, w_out), dtype=x.dtype)
    for i in range(n):
        for oy in range(h_out):
            y0 = oy * spec.stride
            for ox in range(w_out):
                x0 = ox * spec.stride
                patch = xp[i, :, y0:y0 + span_h:spec.dilation,
                           x0:x0 + span_w:spec.dilation]
                for co in range(c_out):
                    out[i, co, oy, ox] = np.sum(patch * weight[co], dtype=np.float64)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def conv2d_grads(x, weight, spec: ConvSpec, grad_out,
                 need_x: bool = True, need_w: bool = True):
    """Gradients of conv2d w.r.t. input and weight for a given output grad."""
    h_out, w_out = spec.output_hw(x.shape[2], x.shape[3])
    p = spec.padding
    grad_x = grad_w = None
    if need_w:
        view = _window_view(_padded(x, p), spec, h_out, w_out)
        grad_w = np.tensordot(grad_out, view, axes=([0, 2, 3], [0, 2, 3]))
    if need_x:
        n, c_in = x.shape[:2]
        hp, wp = x.shape[2] + 2 * p, x.shape[3] + 2 * p
        gx = np.zeros((n, c_in, hp, wp), dtype=x.dtype)
        for ky in range(spec.kernel_h):
            for kx in range(spec.kernel_w):
                # (N, H_out, W_out, C_in) contribution of this kernel tap
                t = np.tensordot(grad_out, weight[:, :, ky, kx], axes=([1], [0]))
                y0 = ky * spec.dilation
                x0 = kx * spec.dilation
                gx[:, :, y0:y0 + spec.stride * h_out:spec.stride,
                   x0:x0 + spec.stride * w_out:spec.stride] += t.transpose(0, 3, 1, 2)
        grad_x = np.ascontiguousarray(gx[:, :, p:hp - p, p:wp - p]) if p else gx
    return grad_x, grad_w


def maxpool2d(x: np.ndarray, window: int = 2, stride: int | None = None):
    """Non-overlapping window max.

    Returns (pooled, idx) where idx holds the flat in-window argmax
    (row-major within the window, first occurrence on ties) used to route
    gradients.
    """
    if stride is None:
        stride = window
    if stride != window:
        raise ShapeError("only non-overlapping pooling (stride == window) is supported")
    _require_nchw(x, "pool input")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(
            f"spatial dims ({h}, {w}) are not divisible by window {window}; "
            "resize the input first"
        )
    blocks = x.reshape(n, c, h // window, window, w // window, window)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // window, w // window, window * window)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2d_grad(x_shape, window: int, idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Scatter `grad_out` back to the recorded argmax positions."""
    n, c, h, w = x_shape
    hb, wb = h // window, w // window
    g = np.zeros((n, c, hb, wb, window * window), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(n, c, hb, wb, window, window).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, h, w))


def upsample2d(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Nearest-neighbour upsampling: each pixel becomes a factor x factor block."""
    _require_nchw(x, "upsample input")
    if int(factor) != factor or factor < 1:
        raise ShapeError(f"upsample factor must be a positive integer, got {factor}")
    if factor == 1:
        return x.copy()
    return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)


def upsample2d_grad(factor: int, grad_out: np.ndarray) -> np.ndarray:
    if factor == 1:
        return grad_out.copy()
    n, c, hf, wf = grad_out.shape
    blocks = grad_out.reshape(n, c, hf // factor, factor, wf // factor, factor)
    return blocks.sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack two NCHW tensors along the channel axis, `a`'s channels first."""
    _require_nchw(a, "first concat operand")
    _require_nchw(b, "second concat operand")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} with {b.shape} along channels")
    return np.concatenate([a, b], axis=1)
