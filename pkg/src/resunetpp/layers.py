"""Parameterized layers and the composite blocks of the segmentation net."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ShapeError, UsageError
from .tensor import ConvSpec


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _prefixed(prefix: str, items):
    return [(f"{prefix}.{name}", obj) for name, obj in items]


class Conv2DLayer:
    """2-d convolution with He-uniform weights and optional bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, *,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 bias: bool = True, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = ConvSpec(kernel, kernel, stride, padding, dilation)
        fan_in = in_channels * kernel * kernel
        self.weight = Variable(
            he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype),
            requires_grad=True)
        self.bias = (Variable(np.zeros(out_channels, dtype=dtype), requires_grad=True)
                     if bias else None)

    def __call__(self, x: Variable) -> Variable:
        x.tape.attach(self.weight)
        if self.bias is not None:
            x.tape.attach(self.bias)
        return ad.conv2d(x, self.weight, self.bias, self.spec)

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def state(self):
        return []


class BatchNorm2D:
    """Per-channel batch normalization with train/eval modes.

    Train mode normalizes by the batch's population statistics and updates
    the running estimates as running = momentum * running + (1 - momentum) *
    batch. Eval mode normalizes by the running estimates. The backward pass
    differentiates through the batch statistics.
    """

    def __init__(self, channels: int, *, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Variable(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Variable(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Variable, mode: str) -> Variable:
        if mode not in ("train", "eval"):
            raise UsageError(f"batch norm mode must be 'train' or 'eval', got {mode!r}")
        xv = x.value
        if xv.ndim != 4 or xv.shape[1] != self.channels:
            raise ShapeError(
                f"batch norm over {self.channels} channels got input {xv.shape}")
        tape = x.tape
        tape.attach(self.gamma)
        tape.attach(self.beta)
        gamma, beta = self.gamma, self.beta
        g_col = gamma.value.reshape(1, -1, 1, 1)

        if mode == "train":
            per_channel = xv.shape[0] * xv.shape[2] * xv.shape[3]
            if per_channel < 2:
                raise UsageError(
                    "batch norm needs at least 2 values per channel in train mode")
            mean = xv.mean(axis=(0, 2, 3))
            var = xv.var(axis=(0, 2, 3))
            inv = (1.0 / np.sqrt(var + self.eps)).reshape(1, -1, 1, 1)
            xhat = (xv - mean.reshape(1, -1, 1, 1)) * inv
            out = g_col * xhat + beta.value.reshape(1, -1, 1, 1)
            mom = self.momentum
            self.running_mean *= mom
            self.running_mean += ((1.0 - mom) * mean).astype(self.running_mean.dtype)
            self.running_var *= mom
            self.running_var += ((1.0 - mom) * var).astype(self.running_var.dtype)

            def backward(g):
                ad.accumulate(beta, g.sum(axis=(0, 2, 3)))
                ad.accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
                if x.requires_grad:
                    dxhat = g * g_col
                    mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                    mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                    ad.accumulate(x, inv * (dxhat - mean_d - xhat * mean_dx))

            return tape.record("batchnorm_train", (x, gamma, beta), out, backward)

        inv = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(1, -1, 1, 1)
        xhat = (xv - self.running_mean.reshape(1, -1, 1, 1)) * inv
        out = g_col * xhat + beta.value.reshape(1, -1, 1, 1)

        def backward(g):
            ad.accumulate(beta, g.sum(axis=(0, 2, 3)))
            ad.accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x.requires_grad:
                ad.accumulate(x, g * g_col * inv)

        return tape.record("batchnorm_eval", (x, gamma, beta), out, backward)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class ConvBNRelu:
    """3x3 convolution (no bias) + batch norm + relu; spatial dims preserved."""

    def __init__(self, in_channels: int, out_channels: int, *, rng, dtype=np.float32):
        self.conv = Conv2DLayer(in_channels, out_channels, 3, padding=1, bias=False,
                                rng=rng, dtype=dtype)
        self.bn = BatchNorm2D(out_channels, dtype=dtype)

    def __call__(self, x: Variable, mode: str) -> Variable:
        return ad.relu(self.bn(self.conv(x), mode))

    def parameters(self):
        return _prefixed("conv", self.conv.parameters()) + _prefixed("bn", self.bn.parameters())

    def state(self):
        return _prefixed("bn", self.bn.state())


class ResBlock:
    """Two conv-bn units with a post-add relu.

    The shortcut is the identity when channel counts match, otherwise a 1x1
    projection convolution.
    """

    def __init__(self, in_channels: int, out_channels: int, *, rng, dtype=np.float32):
        self.conv1 = Conv2DLayer(in_channels, out_channels, 3, padding=1, bias=False,
                                 rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2D(out_channels, dtype=dtype)
        self.conv2 = Conv2DLayer(out_channels, out_channels, 3, padding=1, bias=False,
                                 rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2D(out_channels, dtype=dtype)
        self.shortcut = (None if in_channels == out_channels
                         else Conv2DLayer(in_channels, out_channels, 1, rng=rng, dtype=dtype))

    def __call__(self, x: Variable, mode: str) -> Variable:
        h = ad.relu(self.bn1(self.conv1(x), mode))
        h = self.bn2(self.conv2(h), mode)
        s = x if self.shortcut is None else self.shortcut(x)
        return ad.relu(ad.add(h, s))

    def parameters(self):
        out = (_prefixed("conv1", self.conv1.parameters())
               + _prefixed("bn1", self.bn1.parameters())
               + _prefixed("conv2", self.conv2.parameters())
               + _prefixed("bn2", self.bn2.parameters()))
        if self.shortcut is not None:
            out += _prefixed("shortcut", self.shortcut.parameters())
        return out

    def state(self):
        return _prefixed("bn1", self.bn1.state()) + _prefixed("bn2", self.bn2.state())


class ASPPModule:
    """Parallel dilated 3x3 branches plus a 1x1 branch, concatenated and
    reduced back by a 1x1 fuse convolution.

    Each dilated branch pads by its own rate, so all branches (and the fused
    output) preserve the input's spatial dims.
    """

    def __init__(self, in_channels: int, out_channels: int, dilations=(1, 2, 4), *,
                 rng, dtype=np.float32):
        self.dilations = tuple(int(d) for d in dilations)
        self.branches = [Conv2DLayer(in_channels, out_channels, 3, padding=d,
                                     dilation=d, rng=rng, dtype=dtype)
                         for d in self.dilations]
        self.pointwise = Conv2DLayer(in_channels, out_channels, 1, rng=rng, dtype=dtype)
        self.fuse = Conv2DLayer(out_channels * (len(self.dilations) + 1), out_channels,
                                1, rng=rng, dtype=dtype)

    def __call__(self, x: Variable) -> Variable:
        outs = [branch(x) for branch in self.branches]
        outs.append(self.pointwise(x))
        merged = outs[0]
        for o in outs[1:]:
            merged = ad.concat_channels(merged, o)
        return self.fuse(merged)

    def parameters(self):
        out = []
        for i, branch in enumerate(self.branches):
            out += _prefixed(f"branch{i}", branch.parameters())
        out += _prefixed("pointwise", self.pointwise.parameters())
        out += _prefixed("fuse", self.fuse.parameters())
        return out

    def state(self):
        return []


class AttentionGate:
    """Learned sigmoid mask computed from (gate, skip) that rescales the skip.

    alpha = sigmoid(psi(relu(w_gate(gate) + w_skip(skip)))) has one channel
    and lies strictly in (0, 1); the output is skip * alpha broadcast over
    the skip's channels.
    """

    def __init__(self, skip_channels: int, gate_channels: int,
                 inter_channels: int | None = None, *, rng, dtype=np.float32):
        inter = inter_channels if inter_channels is not None else skip_channels
        self.w_gate = Conv2DLayer(gate_channels, inter, 1, rng=rng, dtype=dtype)
        self.w_skip = Conv2DLayer(skip_channels, inter, 1, rng=rng, dtype=dtype)
        self.psi = Conv2DLayer(inter, 1, 1, rng=rng, dtype=dtype)

    def __call__(self, skip: Variable, gate: Variable) -> Variable:
        ss, gs = skip.value.shape, gate.value.shape
        if ss[0] != gs[0] or ss[2:] != gs[2:]:
            raise ShapeError(
                f"skip {ss} and gate {gs} must agree on batch and spatial dims")
        mix = ad.relu(ad.add(self.w_gate(gate), self.w_skip(skip)))
        alpha = ad.sigmoid(self.psi(mix))
        return ad.scale_channels(skip, alpha)

    def parameters(self):
        return (_prefixed("w_gate", self.w_gate.parameters())
                + _prefixed("w_skip", self.w_skip.parameters())
                + _prefixed("psi", self.psi.parameters()))

    def state(self):
        return []
