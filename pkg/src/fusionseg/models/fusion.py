"""Fusion side: dual-stream decomposition encoder, decoder, cross-attention head, discriminators.

The encoder is shared by both modalities. Its low-frequency stream works on a
4x-downsampled grid with depthwise-conv mixing plus single-head attention; its
high-frequency stream is a stack of invertible affine coupling blocks at full
resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nn import Conv2d, LayerNorm, Linear, Module, from_tokens, from_windows, param, to_tokens, to_windows
from ..tensor import ShapeError, Tensor, ops

LOG_SCALE_CLAMP = 2.0


@dataclass
class FusionConfig:
    c_low: int = 16
    c_high: int = 16
    n_inn: int = 2
    n_lite: int = 2
    d_k: int = 16
    window: int = 8
    cross_attention: bool = True
    decoder: bool = True


@dataclass
class FeaturePair:
    low: Tensor   # [N, C_L, H/4, W/4]
    high: Tensor  # [N, C_H, H, W]


@dataclass
class FusedImage:
    image: Tensor                                   # [N, 1, H, W] in [0, 1]
    attn_maps: tuple | None = None                  # (M1->M2, M2->M1) low-band attention
    features: tuple = field(default=(), repr=False)  # (FeaturePair x, FeaturePair y, fused)


def _check_image(op: str, x: Tensor, multiple: int) -> None:
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(op, x.shape)
    if x.shape[2] % multiple or x.shape[3] % multiple:
        raise ValueError(f"{op}: spatial size {x.shape[2:]} must be a multiple of {multiple}")


class CouplingNet(Module):
    def __init__(self, channels: int, hidden: int, rng):
        self.conv1 = Conv2d(channels, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, channels, 3, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(ops.relu(self.conv1(x)))


class InvertibleBlock(Module):
    """Two-step affine coupling: x1 += phi(x2); x2 = x2 * exp(s(x1)) + eta(x1)."""

    def __init__(self, channels: int, rng, hidden: int | None = None):
        if channels % 2:
            raise ValueError(f"invertible block needs an even channel count, got {channels}")
        half = channels // 2
        hidden = hidden or channels
        self.phi = CouplingNet(half, hidden, rng)
        self.rho = CouplingNet(half, hidden, rng)
        self.eta = CouplingNet(half, hidden, rng)
        self.half = half

    def _log_scale(self, y1: Tensor) -> Tensor:
        return ops.mul(ops.tanh(self.rho(y1)), LOG_SCALE_CLAMP)

    def _split(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] != 2 * self.half:
            raise ValueError(f"invertible block expects {2 * self.half} channels, got shape {x.shape}")
        return x[:, :self.half], x[:, self.half:]

    def forward(self, x: Tensor) -> Tensor:
        x1, x2 = self._split(x)
        y1 = ops.add(x1, self.phi(x2))
        y2 = ops.add(ops.mul(x2, ops.exp(self._log_scale(y1))), self.eta(y1))
        return ops.concat([y1, y2], axis=1)

    def inverse(self, y: Tensor) -> Tensor:
        y1, y2 = self._split(y)
        x2 = ops.mul(ops.sub(y2, self.eta(y1)), ops.exp(ops.neg(self._log_scale(y1))))
        x1 = ops.sub(y1, self.phi(x2))
        return ops.concat([x1, x2], axis=1)


class InvertibleStack(Module):
    def __init__(self, channels: int, n_blocks: int, rng):
        self.blocks = [InvertibleBlock(channels, rng) for _ in range(n_blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x

    def inverse(self, y: Tensor) -> Tensor:
        for b in reversed(self.blocks):
            y = b.inverse(y)
        return y


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v on token matrices [N, L, d]."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("attention", q.shape, k.shape)
    q = ops.mul(q, 1.0 / np.sqrt(q.shape[-1]))
    scores = ops.matmul(q, ops.transpose(k, (0, 2, 1)))
    a = ops.softmax(scores, axis=-1)
    return ops.matmul(a, v), a


class LiteAttentionBlock(Module):
    """Depthwise-conv token mixer followed by single-head self-attention and an MLP."""

    def __init__(self, channels: int, d_k: int, rng):
        self.mixer = Conv2d(channels, channels, 3, rng, groups=channels, gain=1.0)
        self.norm1 = LayerNorm(channels)
        self.wq = Linear(channels, d_k, rng)
        self.wk = Linear(channels, d_k, rng)
        self.wv = Linear(channels, channels, rng)
        self.norm2 = LayerNorm(channels)
        self.mlp1 = Linear(channels, 2 * channels, rng, bias=True, gain=2.0)
        self.mlp2 = Linear(2 * channels, channels, rng, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        x = ops.add(x, self.mixer(x))
        t = to_tokens(x)
        n = self.norm1(t)
        att, _ = attention(self.wq(n), self.wk(n), self.wv(n))
        t = ops.add(t, att)
        t = ops.add(t, self.mlp2(ops.relu(self.mlp1(self.norm2(t)))))
        return from_tokens(t, h, w)


class DecompositionEncoder(Module):
    def __init__(self, cfg: FusionConfig, rng):
        self.stem = Conv2d(1, cfg.c_high, 3, rng)
        self.low_in = Conv2d(cfg.c_high, cfg.c_low, 1, rng)
        self.lite = [LiteAttentionBlock(cfg.c_low, cfg.d_k, rng) for _ in range(cfg.n_lite)]
        self.inn = InvertibleStack(cfg.c_high, cfg.n_inn, rng)

    def forward(self, img: Tensor) -> FeaturePair:
        _check_image("encode", img, 4)
        shallow = ops.relu(self.stem(img))
        low = self.low_in(ops.avg_pool2d(ops.avg_pool2d(shallow)))
        for blk in self.lite:
            low = blk(low)
        return FeaturePair(low=low, high=self.inn(shallow))


def _upsample_low(low: Tensor) -> Tensor:
    return ops.upsample_nearest2x(ops.upsample_nearest2x(low))


class Decoder(Module):
    def __init__(self, cfg: FusionConfig, rng):
        c = cfg.c_high
        self.conv1 = Conv2d(cfg.c_low + cfg.c_high, c, 3, rng)
        self.conv2 = Conv2d(c, c, 3, rng)
        self.out = Conv2d(c, 1, 3, rng, gain=1.0)

    def forward(self, f: FeaturePair) -> Tensor:
        up = _upsample_low(f.low)
        if up.shape[0] != f.high.shape[0] or up.shape[2:] != f.high.shape[2:]:
            raise ShapeError("decode", f.low.shape, f.high.shape)
        h = ops.concat([up, f.high], axis=1)
        h = ops.relu(self.conv1(h))
        h = ops.relu(self.conv2(h))
        return ops.sigmoid(self.out(h))


class ProjectionHead(Module):
    """Decoder-free output used by the no-decoder ablation: 1x1 projection of the fused embedding."""

    def __init__(self, cfg: FusionConfig, rng):
        self.proj = Conv2d(cfg.c_low + cfg.c_high, 1, 1, rng, gain=1.0)

    def forward(self, f: FeaturePair) -> Tensor:
        up = _upsample_low(f.low)
        if up.shape[2:] != f.high.shape[2:]:
            raise ShapeError("decode", f.low.shape, f.high.shape)
        return ops.sigmoid(self.proj(ops.concat([up, f.high], axis=1)))


class CrossAttention(Module):
    """Query from one modality, key/value from the other; used in both directions."""

    def __init__(self, channels: int, d_k: int, rng):
        self.wq = param(rng.standard_normal((channels, d_k)) / np.sqrt(channels))
        self.wk = param(rng.standard_normal((channels, d_k)) / np.sqrt(channels))
        self.wv = param(np.eye(channels) + 0.01 * rng.standard_normal((channels, channels)))

    def forward(self, q_tok: Tensor, kv_tok: Tensor) -> tuple[Tensor, Tensor]:
        if q_tok.shape[-1] != kv_tok.shape[-1] or q_tok.shape[-1] != self.wq.shape[0]:
            raise ShapeError("cross_attention", q_tok.shape, kv_tok.shape)
        return attention(ops.matmul(q_tok, self.wq), ops.matmul(kv_tok, self.wk), ops.matmul(kv_tok, self.wv))


class BandFusion(Module):
    """Fuse one frequency band of two modalities into a single feature map.

    Tokens are taken in non-overlapping ``window`` x ``window`` tiles; a band no
    larger than one tile gets global attention.
    """

    def __init__(self, channels: int, d_k: int, rng, use_attention: bool = True, window: int = 8):
        self.window = window
        self.xattn = CrossAttention(channels, d_k, rng) if use_attention else None
        eye = np.eye(channels)
        w = np.concatenate([0.5 * eye, 0.5 * eye], axis=0) + 0.01 * rng.standard_normal((2 * channels, channels))
        self.merge = param(w)

    def forward(self, a: Tensor, b: Tensor) -> tuple[Tensor, tuple | None]:
        if a.shape != b.shape:
            raise ShapeError("band_fusion", a.shape, b.shape)
        n, _, h, w = a.shape
        ws = min(self.window, h, w)
        ta, tb = to_windows(a, ws), to_windows(b, ws)
        maps = None
        if self.xattn is not None:
            att_ab, map_ab = self.xattn(ta, tb)
            att_ba, map_ba = self.xattn(tb, ta)
            ta = ops.mul(ops.add(ta, att_ab), 0.5)
            tb = ops.mul(ops.add(tb, att_ba), 0.5)
            maps = (map_ab, map_ba)
        merged = ops.matmul(ops.concat([ta, tb], axis=-1), self.merge)
        return from_windows(merged, n, h, w, ws), maps


class FusionNet(Module):
    """Encoder + decoder (pre-training) and the image-level fusion head."""

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = DecompositionEncoder(cfg, rng)
        # the no-decoder ablation swaps the conv decoder for a 1x1 projection everywhere
        self.decoder = Decoder(cfg, rng) if cfg.decoder else ProjectionHead(cfg, rng)
        self.fuse_low = BandFusion(cfg.c_low, cfg.d_k, rng, cfg.cross_attention, cfg.window)
        self.fuse_high = BandFusion(cfg.c_high, cfg.d_k, rng, cfg.cross_attention, cfg.window)

    def encode(self, img: Tensor) -> FeaturePair:
        return self.encoder(img)

    def decode(self, f: FeaturePair) -> Tensor:
        return self.decoder(f)

    def reconstruct(self, img: Tensor) -> tuple[Tensor, FeaturePair]:
        f = self.encode(img)
        return self.decode(f), f

    def fuse_features(self, fx: FeaturePair, fy: FeaturePair) -> tuple[FeaturePair, tuple | None]:
        low, maps = self.fuse_low(fx.low, fy.low)
        high, _ = self.fuse_high(fx.high, fy.high)
        return FeaturePair(low=low, high=high), maps

    def fuse(self, x: Tensor, y: Tensor) -> FusedImage:
        if x.shape != y.shape:
            raise ShapeError("fuse", x.shape, y.shape)
        # encode both modalities in one pass through the shared encoder
        both = self.encode(ops.concat([x, y], axis=0))
        n = x.shape[0]
        fx = FeaturePair(both.low[:n], both.high[:n])
        fy = FeaturePair(both.low[n:], both.high[n:])
        fused, maps = self.fuse_features(fx, fy)
        return FusedImage(image=self.decode(fused), attn_maps=maps, features=(fx, fy, fused))

    def forward(self, x: Tensor, y: Tensor) -> FusedImage:
        return self.fuse(x, y)


class Discriminator(Module):
    """Four conv layers (three stride-2) + global mean + sigmoid -> P(real) per image."""

    def __init__(self, rng, width: int = 8):
        self.c1 = Conv2d(1, width, 3, rng)
        self.c2 = Conv2d(width, 2 * width, 3, rng)
        self.c3 = Conv2d(2 * width, 4 * width, 3, rng)
        self.c4 = Conv2d(4 * width, 1, 3, rng, gain=1.0)

    def forward(self, img: Tensor) -> Tensor:
        _check_image("discriminate", img, 8)
        h = ops.relu(self.c1(img, stride=2))
        h = ops.relu(self.c2(h, stride=2))
        h = ops.relu(self.c3(h, stride=2))
        logit = ops.mean(self.c4(h), axis=(1, 2, 3))
        return ops.sigmoid(logit)


class DiscriminatorPair(Module):
    def __init__(self, rng):
        self.m1 = Discriminator(rng)
        self.m2 = Discriminator(rng)

    def discriminate(self, img: Tensor, which: int) -> Tensor:
        if which not in (1, 2):
            raise ValueError(f"modality id must be 1 or 2, got {which}")
        return (self.m1 if which == 1 else self.m2)(img)
