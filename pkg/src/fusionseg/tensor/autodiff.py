"""Gradient utilities built on the tape: flat views, finite-difference checks, HVPs."""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .core import Tensor, backward, no_grad


def _as_list(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])


def unflatten(vec: np.ndarray, like: Sequence[Tensor]) -> list[np.ndarray]:
    out, i = [], 0
    for t in like:
        out.append(vec[i:i + t.size].reshape(t.shape))
        i += t.size
    if i != vec.size:
        raise ValueError(f"unflatten: vector has {vec.size} entries, params need {i}")
    return out


def flat_grad(params: Sequence[Tensor]) -> np.ndarray:
    return flatten([p.grad if p.grad is not None else np.zeros_like(p.data) for p in params])


def gradient(f: Callable[[], Tensor], params) -> np.ndarray:
    """Flat gradient of the scalar ``f()`` w.r.t. ``params`` (grads are reset first)."""
    named = _as_list(params)
    tensors = [p for _, p in named]
    for p in tensors:
        p.grad = None
    loss = f()
    backward(loss)
    g = flat_grad(tensors)
    for p in tensors:
        p.grad = None
    return g


def hvp(f: Callable[[], Tensor], params, v: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Hessian-vector product of the scalar ``f()`` by central differences of gradients.

    ``params`` are perturbed in place along ``v`` and restored afterwards.
    """
    named = _as_list(params)
    tensors = [p for _, p in named]
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    total = sum(p.size for p in tensors)
    if v.size != total:
        raise ValueError(f"hvp: v has {v.size} entries, params have {total}")
    p0 = [p.data.copy() for p in tensors]
    pinf = max((float(np.abs(d).max()) if d.size else 0.0) for d in p0)
    if eps is None:
        eps = 1e-4 * (1.0 + pinf) / (float(np.abs(v).max()) + 1e-12)
    dirs = unflatten(v, tensors)

    def grad_at(sign: float) -> np.ndarray:
        for p, base, d in zip(tensors, p0, dirs):
            p.data = base + sign * eps * d
        return gradient(f, tensors)

    try:
        gp = grad_at(1.0)
        gm = grad_at(-1.0)
    finally:
        for p, base in zip(tensors, p0):
            p.data = base
    out = (gp - gm) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        for (name, _), piece in zip(named, unflatten(out, tensors)):
            if not np.all(np.isfinite(piece)):
                raise FloatingPointError(f"hvp: non-finite result for parameter {name!r}")
    return out


def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` w.r.t. the data of ``x``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape and finite-difference gradients of ``fn``.

    Non-scalar outputs are contracted with a fixed random weight so every output
    entry participates.
    """
    rng = rng or np.random.default_rng(0x5EED)
    probe = fn(*inputs)
    weight = Tensor(rng.standard_normal(probe.shape)) if probe.size > 1 else None

    def scalar() -> Tensor:
        out = fn(*inputs)
        return (out * weight).sum() if weight is not None else out.sum()

    for t in inputs:
        t.grad = None
    backward(scalar())
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(analytic, numerical_grad(scalar, t, h)))
        t.grad = None
    return worst
