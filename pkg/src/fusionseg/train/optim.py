"""Adam and momentum SGD over named parameter sets, plus the step learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..tensor import Tensor


def step_lr(lr0: float, epoch: int, every: int = 20, factor: float = 0.5) -> float:
    """lr0 * factor ** floor(epoch / every), epochs counted from 0."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * factor ** (epoch // every)


def _check(params: dict, grads: dict) -> None:
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"{k}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[k])}")


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class SGDState:
    buf: dict = field(default_factory=dict)


def optimizer_adam(params: dict, grads: dict, state: AdamState, lr: float,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """One Adam step on plain arrays; returns new arrays, mutates ``state``.

    Parameters without a gradient (``None``) are passed through untouched.
    """
    _check(params, grads)
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = dict(params)
    for k, g in grads.items():
        if g is None:
            continue
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


def optimizer_sgd(params: dict, grads: dict, state: SGDState, lr: float,
                  momentum: float = 0.9, weight_decay: float = 0.0) -> dict:
    """Momentum SGD with L2 weight decay folded into the gradient."""
    _check(params, grads)
    out = dict(params)
    for k, g in grads.items():
        if g is None:
            continue
        d = g + weight_decay * params[k] if weight_decay else g
        if momentum:
            b = state.buf.get(k)
            b = d.copy() if b is None else momentum * b + d
            state.buf[k] = b
            d = b
        out[k] = params[k] - lr * d
    return out


class _TensorOptimizer:
    """Binds a functional optimizer to live ``Tensor`` parameters (reads .grad, writes .data)."""

    def __init__(self, params: dict):
        if not params:
            raise ValueError("optimizer got an empty parameter set")
        self.params = params

    def _apply(self, fn, **kw) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k}")
        new = fn(arrays, grads, self.state, **kw)
        for k in grads:
            self.params[k].data = new[k]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Adam(_TensorOptimizer):
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self) -> None:
        self._apply(optimizer_adam, lr=self.lr, betas=self.betas, eps=self.eps)


class SGD(_TensorOptimizer):
    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.state = SGDState()

    def step(self) -> None:
        self._apply(optimizer_sgd, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay)


def is_finite(x: Tensor | float) -> bool:
    v = x.item() if isinstance(x, Tensor) else float(x)
    return math.isfinite(v)
