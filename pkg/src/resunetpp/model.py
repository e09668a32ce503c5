"""The full encoder/decoder segmentation network.

Topology: a plain conv-bn-relu stem at full resolution, then depth-1 encoder
stages of maxpool + conv-bn-relu + resblock doubling the channels each time,
an ASPP bridge at the coarsest resolution, and a mirrored decoder whose
stages upsample, attention-gate the matching encoder skip, concatenate and
reduce channels with a resblock. A 1x1 convolution plus sigmoid produces the
single-channel probability map at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .errors import ShapeError, ValidationError
from .layers import ASPPModule, AttentionGate, Conv2DLayer, ConvBNRelu, ResBlock, _prefixed


@dataclass
class ResUnetPPConfig:
    input_channels: int = 3
    base_channels: int = 16
    depth: int = 5
    input_size: tuple[int, int] = (256, 256)
    aspp_dilations: tuple[int, ...] = (1, 2, 4)
    seed: int = 0
    dtype: str = "f32"

    def validate(self) -> None:
        if self.depth < 2:
            raise ValidationError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ValidationError("channel counts must be positive")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if self.dtype not in ("f32", "f64"):
            raise ValidationError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")
        if not self.aspp_dilations or min(self.aspp_dilations) < 1:
            raise ValidationError("aspp dilations must be positive integers")
        h, w = self.input_size
        factor = 2 ** (self.depth - 1)
        if h < factor or w < factor or h % factor or w % factor:
            raise ValidationError(
                f"input size {self.input_size} must be divisible by {factor} "
                f"(2^(depth-1) with depth={self.depth})")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def channel_ladder(self) -> list[int]:
        return [self.base_channels * 2 ** s for s in range(self.depth)]


class ResUnetPPModel:
    def __init__(self, config: ResUnetPPConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        dt = config.np_dtype
        ch = config.channel_ladder()

        self.stem = ConvBNRelu(config.input_channels, ch[0], rng=rng, dtype=dt)
        self.encoder = [
            (ConvBNRelu(ch[s - 1], ch[s], rng=rng, dtype=dt),
             ResBlock(ch[s], ch[s], rng=rng, dtype=dt))
            for s in range(1, config.depth)
        ]
        self.bridge = ASPPModule(ch[-1], ch[-1], config.aspp_dilations, rng=rng, dtype=dt)
        self.gates = []
        self.decoder = []
        for s in range(config.depth - 2, -1, -1):
            self.gates.append(AttentionGate(ch[s], ch[s + 1], rng=rng, dtype=dt))
            self.decoder.append(ResBlock(ch[s + 1] + ch[s], ch[s], rng=rng, dtype=dt))
        self.head = Conv2DLayer(ch[0], 1, 1, rng=rng, dtype=dt)

    def forward(self, tape: Tape, x, mode: str = "train", trace: dict | None = None) -> Variable:
        """Run the network; returns per-pixel probabilities in (0, 1).

        `x` is an (N, C, H, W) array or an input Variable already attached
        to `tape`. When `trace` is a dict it receives the intermediate
        shapes ("encoder", "bridge", "pre_head", "output").
        """
        cfg = self.config
        if isinstance(x, Variable):
            v = tape.attach(x)
        else:
            v = tape.leaf(np.asarray(x, dtype=cfg.np_dtype))
        shape = v.value.shape
        if len(shape) != 4 or shape[1] != cfg.input_channels \
                or shape[2:] != tuple(cfg.input_size):
            raise ShapeError(
                f"expected input (N, {cfg.input_channels}, {cfg.input_size[0]}, "
                f"{cfg.input_size[1]}), got {shape}")

        skips = []
        h = self.stem(v, mode)
        skips.append(h)
        for conv, block in self.encoder:
            h = ad.maxpool2d(h)
            h = block(conv(h, mode), mode)
            skips.append(h)
        if trace is not None:
            trace["encoder"] = [s.value.shape for s in skips]

        h = self.bridge(skips[-1])
        if trace is not None:
            trace["bridge"] = h.value.shape

        for i, (gate, block) in enumerate(zip(self.gates, self.decoder)):
            skip = skips[self.config.depth - 2 - i]
            up = ad.upsample2d(h, 2)
            gated = gate(skip, up)
            h = block(ad.concat_channels(up, gated), mode)
        if trace is not None:
            trace["pre_head"] = h.value.shape

        out = ad.sigmoid(self.head(h))
        if trace is not None:
            trace["output"] = out.value.shape
        return out

    def predict(self, x) -> np.ndarray:
        """Eval-mode probabilities without recording gradients."""
        return self.forward(Tape(grad_enabled=False), x, mode="eval").value

    def parameters(self):
        """Ordered (name, Variable) pairs for every trainable tensor."""
        items = _prefixed("stem", self.stem.parameters())
        for i, (conv, block) in enumerate(self.encoder, start=1):
            items += _prefixed(f"enc{i}.conv", conv.parameters())
            items += _prefixed(f"enc{i}.res", block.parameters())
        items += _prefixed("bridge", self.bridge.parameters())
        for i, (gate, block) in enumerate(zip(self.gates, self.decoder), start=1):
            items += _prefixed(f"dec{i}.gate", gate.parameters())
            items += _prefixed(f"dec{i}.res", block.parameters())
        items += _prefixed("head", self.head.parameters())
        return items

    def state_tensors(self):
        """Ordered (name, ndarray) pairs for non-trainable state (BN stats)."""
        items = _prefixed("stem", self.stem.state())
        for i, (conv, block) in enumerate(self.encoder, start=1):
            items += _prefixed(f"enc{i}.conv", conv.state())
            items += _prefixed(f"enc{i}.res", block.state())
        for i, (gate, block) in enumerate(zip(self.gates, self.decoder), start=1):
            items += _prefixed(f"dec{i}.res", block.state())
        return items


def build_model(config: ResUnetPPConfig) -> ResUnetPPModel:
    """Deterministically initialized model; same seed, same parameters."""
    return ResUnetPPModel(config)


def count_parameters(model: ResUnetPPModel) -> int:
    return sum(v.value.size for _, v in model.parameters() if v.requires_grad)
