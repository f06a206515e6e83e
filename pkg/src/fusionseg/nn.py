"""Parameter containers and the handful of layers the networks are built from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, ops

ParamSet = "OrderedDict[str, Tensor]"


class Module:
    """Attribute-based parameter registry, in the spirit of ``torch.nn.Module``.

    Parameters are ``Tensor`` attributes with ``requires_grad``; submodules are
    ``Module`` attributes or lists of them. Names are dotted attribute paths.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def params(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r}")
            p.name = name
            out[name] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.params().values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params().items())

    def load_state_dict(self, state, strict: bool = True) -> None:
        own = self.params()
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if k not in state:
                continue
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(gain / fan_in)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, groups: int = 1,
                 zero_init: bool = False, bias: bool = True, gain: float = 2.0):
        self.k, self.groups = k, groups
        shape = (cout, cin // groups, k, k)
        w = np.zeros(shape) if zero_init else he_normal(rng, shape, (cin // groups) * k * k, gain)
        self.weight = param(w)
        self.bias = param(np.zeros((1, cout, 1, 1))) if bias else None

    def forward(self, x: Tensor, stride: int = 1) -> Tensor:
        if stride == 1:
            y = ops.conv2d(x, self.weight, padding=self.k // 2, groups=self.groups)
        else:
            y = ops.conv2d_strided(x, self.weight, stride=stride, padding=self.k // 2)
        return y if self.bias is None else ops.add(y, self.bias)


class Linear(Module):
    """Token-wise linear map on the last axis: x [..., din] -> [..., dout]."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = False, gain: float = 1.0):
        self.weight = param(he_normal(rng, (din, dout), din, gain))
        self.bias = param(np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(ops.mul(ops.layer_norm(x), self.gamma), self.beta)


def to_tokens(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, H*W, C]."""
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, _, c = t.shape
    return ops.reshape(ops.transpose(t, (0, 2, 1)), (n, c, h, w))


def to_windows(x: Tensor, ws: int) -> Tensor:
    """[N, C, H, W] -> [N * (H/ws) * (W/ws), ws*ws, C] non-overlapping window tokens."""
    n, c, h, w = x.shape
    if h % ws or w % ws:
        raise ValueError(f"window size {ws} does not tile {h}x{w}")
    t = ops.reshape(x, (n, c, h // ws, ws, w // ws, ws))
    t = ops.transpose(t, (0, 2, 4, 3, 5, 1))
    return ops.reshape(t, (n * (h // ws) * (w // ws), ws * ws, c))


def from_windows(t: Tensor, n: int, h: int, w: int, ws: int) -> Tensor:
    c = t.shape[-1]
    x = ops.reshape(t, (n, h // ws, w // ws, ws, ws, c))
    x = ops.transpose(x, (0, 5, 1, 3, 2, 4))
    return ops.reshape(x, (n, c, h, w))
