"""Parameter containers, basic layers and the Adam optimiser."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from pir.autodiff import functional as F
from pir.autodiff.rng import uniform_init
from pir.autodiff.tensor import Tensor, layer_norm
from pir.errors import NumericError


class Module:
    """Attribute-traversing parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad=True``; child
    modules may live in attributes or in lists of modules.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter {key!r} in checkpoint")
            value = np.asarray(state[key], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"parameter {key!r}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(uniform_init(rng, (n_in, n_out), n_in))
        self.bias = param(uniform_init(rng, (n_out,), n_in)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 1:
            return self.forward(x.reshape(1, -1)).reshape(-1)
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        fan_in = c_in * kernel * kernel
        self.weight = param(uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = param(uniform_init(rng, (c_out,), fan_in))
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias)


class Adam:
    """Adaptive moment estimation (Kingma & Ba) with bias correction."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient encountered")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
