"""Differentiable operations on :class:`Tensor`.

Images are laid out ``[N, C, H, W]``. Convolutions are cross-correlations
(the deep-learning convention) with zero padding and stride 1; strided and
transposed variants are composed from ``conv2d``, ``slice_``, ``dilate2d``
and ``flip2d`` so their gradients come for free.
"""
from __future__ import annotations

import numpy as np

from .core import DTYPE, ShapeError, Tensor, as_tensor

LOG_EPS = 1e-12
DIV_EPS = 1e-12
PEARSON_EPS = 1e-12


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), bw)


def _safe_denominator(d: np.ndarray) -> np.ndarray:
    sign = np.where(d < 0, -1.0, 1.0)
    return sign * (np.abs(d) + DIV_EPS)


def div(a, b) -> Tensor:
    """a / b with the denominator pushed DIV_EPS away from zero (sign kept)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    d = _safe_denominator(b.data)
    out = a.data / d

    def bw(g):
        return _unbroadcast(g / d, a.shape), _unbroadcast(-g * out / d, b.shape)

    return Tensor._make(out, (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a, b)
    take_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return Tensor._make(np.maximum(a.data, b.data), (a, b), bw)


# --- elementwise unary --------------------------------------------------------

def neg(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._make(-x.data, (x,), lambda g: (-g,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * s,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x) -> Tensor:
    """sqrt(x + LOG_EPS); inputs are expected non-negative."""
    x = as_tensor(x)
    out = np.sqrt(np.maximum(x.data, 0.0) + LOG_EPS)
    return Tensor._make(out, (x,), lambda g: (0.5 * g / out,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    """log(x + LOG_EPS)."""
    x = as_tensor(x)
    shifted = x.data + LOG_EPS
    return Tensor._make(np.log(shifted), (x,), lambda g: (g / shifted,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._make(out, (x,), lambda g: (g * (1.0 - out * out),))


# --- reductions and shape ops -------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._make(np.asarray(out, dtype=DTYPE), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axes, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return Tensor._make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def slice_(x, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return Tensor._make(np.array(out, dtype=DTYPE), (x,), bw)


# --- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), bw)


# --- convolution --------------------------------------------------------------

def _pair(p) -> tuple[int, int]:
    return (p, p) if isinstance(p, int) else (int(p[0]), int(p[1]))


def _im2col(xp: np.ndarray, kh: int, kw: int, groups: int) -> np.ndarray:
    """Padded [N,C,Hp,Wp] -> columns [G, C/G*kh*kw, N*Ho*Wo]."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    return cols.reshape(groups, (c // groups) * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    n, c, hp, wp = shape
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x, w, padding=0, groups: int = 1) -> Tensor:
    """Stride-1 2-D cross-correlation with zero padding.

    x: [N, C, H, W]; w: [O, C // groups, kh, kw].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if c % groups or o % groups or cg != c // groups:
        raise ShapeError("conv2d", x.shape, w.shape)
    ph, pw = _pair(padding)
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    cols = _im2col(xp, kh, kw, groups)
    wm = w.data.reshape(groups, o // groups, cg * kh * kw)
    out = np.matmul(wm, cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(groups, o // groups, n * ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(w.shape)
        gcols = np.matmul(wm.transpose(0, 2, 1), gm)
        gxp = _col2im(gcols, xp.shape, kh, kw)
        return gxp[:, :, ph:ph + h, pw:pw + wd], gw

    return Tensor._make(np.ascontiguousarray(out), (x, w), bw)


def dilate2d(x, stride: int) -> Tensor:
    """Insert ``stride - 1`` zeros between neighbouring pixels."""
    x = as_tensor(x)
    if stride == 1:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=DTYPE)
    out[:, :, ::stride, ::stride] = x.data
    return Tensor._make(out, (x,), lambda g: (g[:, :, ::stride, ::stride],))


def flip2d(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._make(x.data[..., ::-1, ::-1].copy(), (x,), lambda g: (g[..., ::-1, ::-1],))


def conv2d_strided(x, w, stride: int = 1, padding=0) -> Tensor:
    out = conv2d(x, w, padding=padding)
    if stride == 1:
        return out
    return slice_(out, (slice(None), slice(None), slice(None, None, stride), slice(None, None, stride)))


def conv_transpose2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; w: [C_in, C_out, k, k]. Output (H-1)*stride - 2p + k."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    k = w.shape[2]
    if padding > k - 1:
        raise ValueError("conv_transpose2d: padding must be <= kernel - 1")
    kernel = transpose(flip2d(w), (1, 0, 2, 3))
    return conv2d(dilate2d(x, stride), kernel, padding=k - 1 - padding)


# --- pooling / resampling -----------------------------------------------------

def _check_even(op: str, x: Tensor):
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(op, x.shape)


def avg_pool2d(x) -> Tensor:
    x = as_tensor(x)
    _check_even("avg_pool2d", x)
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor._make(out, (x,), bw)


def max_pool2d(x) -> Tensor:
    """2x2 max pooling; ties route the gradient to the first window element."""
    x = as_tensor(x)
    _check_even("max_pool2d", x)
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gb,)

    return Tensor._make(out, (x,), bw)


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2x", x.shape)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), bw)


# --- normalization ------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part; compose with mul/add)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def bw(g):
        gsum = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv / d * (d * g - gsum - xhat * gx),)

    return Tensor._make(xhat, (x,), bw)


# --- image filters ------------------------------------------------------------

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def pad_edge(x, width: int = 1) -> Tensor:
    """Replicate-pad the last two axes by ``width``."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    top = concat([slice_(x, (..., slice(0, 1), slice(None)))] * width, axis=-2)
    bot = concat([slice_(x, (..., slice(h - 1, h), slice(None)))] * width, axis=-2)
    x = concat([top, x, bot], axis=-2)
    left = concat([slice_(x, (..., slice(None), slice(0, 1)))] * width, axis=-1)
    right = concat([slice_(x, (..., slice(None), slice(w - 1, w)))] * width, axis=-1)
    return concat([left, x, right], axis=-1)


def sobel_gradients(x) -> tuple[Tensor, Tensor]:
    """Per-channel Sobel responses with replicated borders; x: [N, C, H, W]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("sobel", x.shape)
    n, c, h, w = x.shape
    flat = pad_edge(reshape(x, (n * c, 1, h, w)))
    k = Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None])
    both = conv2d(flat, k)
    gx = reshape(both[:, 0:1], (n, c, h, w))
    gy = reshape(both[:, 1:2], (n, c, h, w))
    return gx, gy


def sobel_magnitude(x) -> Tensor:
    """L1 gradient magnitude 0.5 * (|Gx| + |Gy|)."""
    gx, gy = sobel_gradients(x)
    return mul(add(abs_(gx), abs_(gy)), 0.5)


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(x, sigma: float, size: int | None = None, padding: str = "same") -> Tensor:
    """Separable Gaussian filter per channel; padding 'same' (zeros) or 'valid'."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("gaussian_blur", x.shape)
    if size is None:
        size = 2 * int(np.ceil(3 * sigma)) + 1
    n, c, h, w = x.shape
    k = gaussian_kernel1d(size, sigma)
    flat = reshape(x, (n * c, 1, h, w))
    half = size // 2 if padding == "same" else 0
    out = conv2d(flat, Tensor(k.reshape(1, 1, 1, size)), padding=(0, half))
    out = conv2d(out, Tensor(k.reshape(1, 1, size, 1)), padding=(half, 0))
    return reshape(out, (n, c) + out.shape[2:])


# --- statistics ---------------------------------------------------------------

def var(x, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance."""
    x = as_tensor(x)
    mu = mean(x, axis=axis, keepdims=True)
    return mean(square(sub(x, mu)), axis=axis, keepdims=keepdims)


def cov(a, b, axis=None, keepdims: bool = False) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("cov", a.shape, b.shape)
    am = sub(a, mean(a, axis=axis, keepdims=True))
    bm = sub(b, mean(b, axis=axis, keepdims=True))
    return mean(mul(am, bm), axis=axis, keepdims=keepdims)


def pearson(a, b, axis=None) -> Tensor:
    """Pearson correlation reduced over ``axis``; zero where either side has no variance."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("pearson", a.shape, b.shape)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    ac = a.data - a.data.mean(axis=axes, keepdims=True)
    bc = b.data - b.data.mean(axis=axes, keepdims=True)
    va = (ac * ac).mean(axis=axes, keepdims=True)
    vb = (bc * bc).mean(axis=axes, keepdims=True)
    c = (ac * bc).mean(axis=axes, keepdims=True)
    denom = np.sqrt(va * vb)
    ok = denom > PEARSON_EPS
    safe = np.where(ok, denom, 1.0)
    r = np.where(ok, c / safe, 0.0)
    va_s = np.where(ok, va, 1.0)
    vb_s = np.where(ok, vb, 1.0)

    def bw(g):
        gk = np.expand_dims(g, axes) if g.ndim < a.ndim else g
        gk = np.where(ok, gk, 0.0)
        ga = gk / n * (bc / safe - r * ac / va_s)
        gb = gk / n * (ac / safe - r * bc / vb_s)
        return ga, gb

    return Tensor._make(np.squeeze(r, axis=axes), (a, b), bw)
