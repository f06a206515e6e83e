"""Training objectives for the pre-training, fusion and segmentation stages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics.fusion import fit_window
from .tensor import ShapeError, Tensor, as_tensor, ops

CORR_EPS = 1.01
DICE_SMOOTH = 1e-5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    lambda_adv: float = 0.1
    sigma: float = 0.5
    lambda_fuse: float = 0.5
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        for name in ("lambda_adv", "lambda_fuse", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def eps(self) -> float:
        return CORR_EPS


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def cc(a, b) -> Tensor:
    """Pearson correlation per channel (and per sample for 4-D input), averaged."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("cc", a, b)
    if a.ndim not in (3, 4):
        raise ShapeError("cc", a.shape)
    return ops.mean(ops.pearson(a, b, axis=(-2, -1)))


def correlation_ratio(cc_high, cc_low) -> Tensor:
    return ops.div(ops.square(cc_high), ops.add(cc_low, CORR_EPS))


def loss_correlation(f1, f2) -> Tensor:
    """High-band correlation squared over (low-band correlation + 1.01)."""
    _same_shape("loss_correlation", f1.high, f2.high)
    _same_shape("loss_correlation", f1.low, f2.low)
    return correlation_ratio(cc(f1.high, f2.high), cc(f1.low, f2.low))


def loss_adv_generator(d_out_1, d_out_2) -> Tensor:
    """E[log(1 - D1(.))] + E[log(1 - D2(.))]; minimized by the generator."""
    d1, d2 = as_tensor(d_out_1), as_tensor(d_out_2)
    return ops.add(ops.mean(ops.log(ops.sub(1.0, d1))), ops.mean(ops.log(ops.sub(1.0, d2))))


def loss_discriminator(d_real, d_fake) -> Tensor:
    """Binary cross-entropy for a discriminator: real -> 1, fake -> 0."""
    real = ops.mean(ops.log(as_tensor(d_real)))
    fake = ops.mean(ops.log(ops.sub(1.0, as_tensor(d_fake))))
    return ops.neg(ops.add(real, fake))


def ssim(a, b, data_range: float = 1.0) -> Tensor:
    """Differentiable single-scale SSIM, mean over valid 11x11 Gaussian windows."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("ssim", a, b)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    window = fit_window(SSIM_WINDOW, a.shape)

    def blur(t):
        return ops.gaussian_blur(t, SSIM_SIGMA, window, padding="valid")

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = ops.square(mu_a), ops.square(mu_b), ops.mul(mu_a, mu_b)
    s_aa = ops.sub(blur(ops.square(a)), mu_aa)
    s_bb = ops.sub(blur(ops.square(b)), mu_bb)
    s_ab = ops.sub(blur(ops.mul(a, b)), mu_ab)
    num = ops.mul(ops.add(ops.mul(mu_ab, 2.0), c1), ops.add(ops.mul(s_ab, 2.0), c2))
    den = ops.mul(ops.add(ops.add(mu_aa, mu_bb), c1), ops.add(ops.add(s_aa, s_bb), c2))
    return ops.mean(ops.div(num, den))


def loss_content_pretrain(x, recon) -> Tensor:
    """Per-pixel mean squared error plus (1 - SSIM) for one modality."""
    x, recon = as_tensor(x), as_tensor(recon)
    _same_shape("loss_content_pretrain", x, recon)
    mse = ops.mean(ops.square(ops.sub(x, recon)))
    return ops.add(mse, ops.sub(1.0, ssim(x, recon)))


def loss_enc_total(adv, corr, content, w: LossWeights) -> Tensor:
    return ops.add(ops.add(ops.mul(as_tensor(adv), w.lambda_adv), ops.mul(as_tensor(corr), w.sigma)),
                   ops.mul(as_tensor(content), 1.0 - w.sigma))


def loss_text(fused, x, y) -> Tensor:
    """Mean absolute gap between |grad fused| and the stronger source gradient."""
    fused, x, y = as_tensor(fused), as_tensor(x), as_tensor(y)
    _same_shape("loss_text", fused, x)
    _same_shape("loss_text", fused, y)
    target = ops.maximum(ops.sobel_magnitude(x), ops.sobel_magnitude(y))
    return ops.mean(ops.abs_(ops.sub(ops.sobel_magnitude(fused), target)))


def loss_fusion_total(adv, corr, text, w: LossWeights) -> Tensor:
    """Fusion-stage objective: same weighting as pre-training with the gradient loss as content."""
    return loss_enc_total(adv, corr, text, w)


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return np.moveaxis(np.eye(k)[labels], -1, 1)


def loss_ce(probs: Tensor, gt: np.ndarray) -> Tensor:
    oh = one_hot(gt, probs.shape[1])
    return ops.neg(ops.mean(ops.sum_(ops.mul(ops.log(probs), oh), axis=1)))


def loss_dice(probs: Tensor, gt: np.ndarray) -> Tensor:
    """1 - mean over classes of soft Dice, pooled over the batch."""
    oh = one_hot(gt, probs.shape[1])
    axes = (0, 2, 3)
    inter = ops.sum_(ops.mul(probs, oh), axis=axes)
    denom = ops.add(ops.sum_(probs, axis=axes), oh.sum(axis=axes))
    dice = ops.div(ops.add(ops.mul(inter, 2.0), DICE_SMOOTH), ops.add(denom, DICE_SMOOTH))
    return ops.sub(1.0, ops.mean(dice))


def loss_seg(out, gt: np.ndarray, w: LossWeights) -> Tensor:
    return ops.add(ops.mul(loss_ce(out.probs, gt), w.alpha), ops.mul(loss_dice(out.probs, gt), w.beta))


def loss_joint(ls, lf, w: LossWeights) -> Tensor:
    return ops.add(as_tensor(ls), ops.mul(as_tensor(lf), w.lambda_fuse))
