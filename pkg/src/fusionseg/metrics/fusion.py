"""No-reference and source-referenced fusion quality metrics (numpy only).

Images are float arrays in [0, 1]. EN and MI quantize to 256 levels; SD, SF,
VIF and Qabf work on the 0-255 intensity scale; SSIM uses dynamic range 1.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

FUSION_COLUMNS = ("EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM")

# Xydeas-Petrovic edge-preservation constants
QG = (0.9994, -15.0, 0.5)
QA = (0.9879, -22.0, 0.8)
VIF_NOISE_VAR = 2.0
VIF_EPS = 1e-10


@dataclass
class FusionMetricsReport:
    en: float
    sd: float
    sf: float
    mi: float
    scd: float
    vif: float
    qabf: float
    ssim: float

    def row(self) -> list[float]:
        return [self.en, self.sd, self.sf, self.mi, self.scd, self.vif, self.qabf, self.ssim]

    def as_dict(self) -> dict:
        return asdict(self)


def _check(*imgs: np.ndarray) -> list[np.ndarray]:
    arrs = [np.asarray(i, dtype=np.float64) for i in imgs]
    for a in arrs:
        if a.ndim != 2:
            raise ValueError(f"expected a 2-D image, got shape {a.shape}")
        if a.shape != arrs[0].shape:
            raise ValueError(f"shape mismatch: {arrs[0].shape} vs {a.shape}")
    return arrs


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.int64)


def _entropy_from_counts(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def en(img) -> float:
    (img,) = _check(img)
    return _entropy_from_counts(np.bincount(quantize(img).ravel(), minlength=256))


def sd(img) -> float:
    (img,) = _check(img)
    return float(np.std(img * 255.0))


def sf(img) -> float:
    (img,) = _check(img)
    v = img * 255.0
    rf = np.sqrt(np.mean((v[:, 1:] - v[:, :-1]) ** 2))
    cf = np.sqrt(np.mean((v[1:, :] - v[:-1, :]) ** 2))
    return float(np.sqrt(rf ** 2 + cf ** 2))


def mutual_information(a, b) -> float:
    a, b = _check(a, b)
    qa, qb = quantize(a).ravel(), quantize(b).ravel()
    joint = np.bincount(qa * 256 + qb, minlength=256 * 256).reshape(256, 256).astype(np.float64)
    return (_entropy_from_counts(joint.sum(axis=1)) + _entropy_from_counts(joint.sum(axis=0))
            - _entropy_from_counts(joint.ravel()))


def mi(fused, src1, src2) -> float:
    return mutual_information(fused, src1) + mutual_information(fused, src2)


def pearson(a, b) -> float:
    """Pearson r; 0 when either argument has zero variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ac, bc = a - a.mean(), b - b.mean()
    den = math.sqrt(float((ac * ac).sum()) * float((bc * bc).sum()))
    if den <= 1e-12 * a.size:
        return 0.0
    return float((ac * bc).sum() / den)


def scd(fused, src1, src2) -> float:
    f, a, b = _check(fused, src1, src2)
    return pearson(f - b, a) + pearson(f - a, b)


def _gauss_window(n: int) -> np.ndarray:
    sd_ = n / 5.0
    half = (n - 1) / 2.0
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sd_ * sd_))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def _filt(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return convolve2d(img, np.rot90(win, 2), mode="valid")


def vif_pair(ref, dist) -> float:
    """Pixel-domain VIF of ``dist`` against ``ref`` over four scales."""
    ref, dist = _check(ref, dist)
    ref, dist = ref * 255.0, dist * 255.0
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = _gauss_window(n)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = _filt(ref, win)[::2, ::2]
            dist = _filt(dist, win)[::2, ::2]
        if min(ref.shape) < n:
            break
        mu1, mu2 = _filt(ref, win), _filt(dist, win)
        s1 = np.maximum(_filt(ref * ref, win) - mu1 * mu1, 0.0)
        s2 = np.maximum(_filt(dist * dist, win) - mu2 * mu2, 0.0)
        s12 = _filt(ref * dist, win) - mu1 * mu2
        g = s12 / (s1 + VIF_EPS)
        sv = s2 - g * s12
        low1 = s1 < VIF_EPS
        g[low1] = 0
        sv[low1] = s2[low1]
        s1[low1] = 0
        low2 = s2 < VIF_EPS
        g[low2] = 0
        sv[low2] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv[sv <= VIF_EPS] = VIF_EPS
        num += float(np.sum(np.log10(1.0 + g * g * s1 / (sv + VIF_NOISE_VAR))))
        den += float(np.sum(np.log10(1.0 + s1 / VIF_NOISE_VAR)))
    if den <= 0.0:
        # flat reference: nothing to preserve
        return 1.0
    return num / den


def vif(fused, src1, src2) -> float:
    return 0.5 * (vif_pair(src1, fused) + vif_pair(src2, fused))


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def _edges(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # mirrored borders: a flat image must not grow edges at the frame
    sx = convolve2d(img, _SOBEL_X[::-1, ::-1], mode="same", boundary="symm")
    sy = convolve2d(img, _SOBEL_Y[::-1, ::-1], mode="same", boundary="symm")
    g = np.sqrt(sx * sx + sy * sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(sx == 0, np.pi / 2, np.arctan(sy / np.where(sx == 0, 1.0, sx)))
    return g, a


def _sig(x, consts) -> np.ndarray:
    gamma, kappa, sigma = consts
    return gamma / (1.0 + np.exp(kappa * (x - sigma)))


QABF_PERFECT = float(_sig(1.0, QG) * _sig(1.0, QA))


def _preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    ratio = np.ones_like(g_src)
    hi = g_src > g_f
    lo = g_src < g_f
    ratio[hi] = g_f[hi] / g_src[hi]
    ratio[lo] = g_src[lo] / g_f[lo]
    orient = 1.0 - np.abs(a_src - a_f) / (np.pi / 2)
    return _sig(ratio, QG) * _sig(orient, QA)


def qabf(fused, src1, src2, normalize: bool = True) -> float:
    """Edge-transfer measure Q^{AB/F}, weighted by source edge strength (L = 1).

    With ``normalize`` the per-pixel preservation is divided by its value at a
    perfect transfer, so fusing an image with itself scores 1.
    """
    f, a, b = _check(fused, src1, src2)
    ga, aa = _edges(a * 255.0)
    gb, ab = _edges(b * 255.0)
    gf, af = _edges(f * 255.0)
    qaf = _preservation(ga, aa, gf, af)
    qbf = _preservation(gb, ab, gf, af)
    den = float(np.sum(ga + gb))
    if den == 0.0:
        return 0.0
    q = float(np.sum(qaf * ga + qbf * gb) / den)
    if normalize:
        q /= QABF_PERFECT
    return float(np.clip(q, 0.0, 1.0))


def fit_window(window: int, shape) -> int:
    side = min(window, *shape[-2:])
    return side if side % 2 else side - 1


def ssim(a, b, data_range: float = 1.0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM averaged over valid Gaussian windows.

    Images smaller than the window use the largest odd window that fits.
    """
    a, b = _check(a, b)
    window = fit_window(window, a.shape)
    r = np.arange(window) - (window - 1) / 2.0
    g1 = np.exp(-(r * r) / (2 * sigma * sigma))
    g1 /= g1.sum()
    win = np.outer(g1, g1)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def filt(x):
        return convolve2d(x, win, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a ** 2
    s_bb = filt(b * b) - mu_b ** 2
    s_ab = filt(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * s_ab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2))
    return float(smap.mean())


def fusion_report(fused, src1, src2) -> FusionMetricsReport:
    f, a, b = _check(fused, src1, src2)
    return FusionMetricsReport(
        en=en(f), sd=sd(f), sf=sf(f), mi=mi(f, a, b), scd=scd(f, a, b),
        vif=vif(f, a, b), qabf=qabf(f, a, b), ssim=0.5 * (ssim(f, a) + ssim(f, b)),
    )
