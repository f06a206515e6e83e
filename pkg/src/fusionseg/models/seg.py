"""Follower network: small U-shaped CNN with an attention bottleneck and adapter skips."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import Conv2d, LayerNorm, Linear, Module, from_tokens, to_tokens
from ..tensor import ShapeError, Tensor, ops
from .fusion import attention


@dataclass
class SegConfig:
    in_channels: int = 1
    widths: tuple = (16, 32, 64)
    n_classes: int = 3
    d_k: int = 32


@dataclass
class SegOutput:
    logits: Tensor  # [N, K, H, W]
    probs: Tensor   # softmax over K


class Adapter(Module):
    """1x1 conv whose output is added back to its input; the skip is taken after it."""

    def __init__(self, channels: int, rng):
        self.proj = Conv2d(channels, channels, 1, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.proj(x))


class ConvStage(Module):
    def __init__(self, cin: int, cout: int, rng):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.adapter = Adapter(cout, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.relu(self.conv1(x))
        x = ops.relu(self.conv2(x))
        return self.adapter(x)


class AttentionBottleneck(Module):
    def __init__(self, channels: int, d_k: int, rng):
        self.norm = LayerNorm(channels)
        self.wq = Linear(channels, d_k, rng)
        self.wk = Linear(channels, d_k, rng)
        self.wv = Linear(channels, channels, rng)
        self.out = Linear(channels, channels, rng)
        self.out.weight.data[:] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        t = to_tokens(x)
        n = self.norm(t)
        att, _ = attention(self.wq(n), self.wk(n), self.wv(n))
        return from_tokens(ops.add(t, self.out(att)), h, w)


class SegNet(Module):
    def __init__(self, cfg: SegConfig, rng: np.random.Generator):
        self.cfg = cfg
        w1, w2, w3 = cfg.widths
        self.enc1 = ConvStage(cfg.in_channels, w1, rng)
        self.enc2 = ConvStage(w1, w2, rng)
        self.enc3 = ConvStage(w2, w3, rng)
        self.mid = Conv2d(w3, w3, 3, rng)
        self.attn = AttentionBottleneck(w3, cfg.d_k, rng)
        self.dec3 = ConvStage(w3 + w3, w3, rng)
        self.dec2 = ConvStage(w3 + w2, w2, rng)
        self.dec1 = ConvStage(w2 + w1, w1, rng)
        self.head = Conv2d(w1, cfg.n_classes, 1, rng, gain=1.0)

    def forward(self, img: Tensor) -> SegOutput:
        if img.ndim != 4 or img.shape[1] != self.cfg.in_channels:
            raise ShapeError("segment", img.shape)
        if img.shape[2] % 8 or img.shape[3] % 8:
            raise ValueError(f"segment: spatial size {img.shape[2:]} must be a multiple of 8")
        s1 = self.enc1(img)
        s2 = self.enc2(ops.max_pool2d(s1))
        s3 = self.enc3(ops.max_pool2d(s2))
        b = ops.relu(self.mid(ops.max_pool2d(s3)))
        b = self.attn(b)
        d = self.dec3(ops.concat([ops.upsample_nearest2x(b), s3], axis=1))
        d = self.dec2(ops.concat([ops.upsample_nearest2x(d), s2], axis=1))
        d = self.dec1(ops.concat([ops.upsample_nearest2x(d), s1], axis=1))
        logits = self.head(d)
        return SegOutput(logits=logits, probs=ops.softmax(logits, axis=1))


def segment(img: Tensor, net: SegNet) -> SegOutput:
    return net(img)


def predict_mask(out: SegOutput) -> np.ndarray:
    """Per-pixel argmax over classes; ties resolve to the lowest class index."""
    return np.argmax(out.probs.data, axis=1).astype(np.int64)
