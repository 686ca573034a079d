"""Minimal module system: parameter discovery and a seeded conv layer."""
from __future__ import annotations

import numpy as np

from .tensor import ParamSet, Tensor, conv2d


class Module:
    """Parameters are discovered by walking attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def params(self) -> ParamSet:
        return ParamSet(self.named_parameters())

    def conv_layers(self):
        for value in vars(self).values():
            if isinstance(value, Conv2d):
                yield value
            elif isinstance(value, Module):
                yield from value.conv_layers()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.conv_layers()


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None):
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        bound = np.sqrt(6.0 / (c_in * k * k + c_out * k * k))
        self.weight = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def set_identity(self) -> None:
        """Center-tap channel identity (requires c_in == c_out)."""
        assert self.c_in == self.c_out
        w = np.zeros(self.weight.shape)
        c = self.k // 2
        w[np.arange(self.c_out), np.arange(self.c_in), c, c] = 1.0
        self.weight.data[...] = w
        self.bias.data[...] = 0.0

    def set_zero(self) -> None:
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0
