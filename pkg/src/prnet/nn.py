"""Minimal module system: parameter registration, init helpers, basic layers.

Parameters are plain :class:`Tensor` objects with ``requires_grad=True``.
Assigning a Tensor or Module to an attribute registers it; iteration order of
``named_parameters`` follows construction order, which makes checkpoints and
seeded initialization reproducible byte for byte.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name: str, value) -> None:
        params = self.__dict__.get("_params")
        children = self.__dict__.get("_children")
        if params is not None:
            params.pop(name, None)
            children.pop(name, None)
            if isinstance(value, Tensor):
                params[name] = value
            elif isinstance(value, Module):
                children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}.{name}" if prefix else name), p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class ModuleList(Module):
    def __init__(self, modules: Iterable[Module] = ()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.01) -> Tensor:
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def full(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


# ---------------------------------------------------------------------------
# basic layers
# ---------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        padding: int = 0,
        stride: int = 1,
        groups: int = 1,
        bias: bool = True,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = kaiming_uniform(
            rng, (out_channels, in_channels // groups, kernel_size, kernel_size), fan_in
        )
        self.bias = zeros(out_channels) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(
            x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups
        )


class TransposedConv2x2(Module):
    """Stride-2 learnable upsampler (doubles H and W)."""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int):
        super().__init__()
        self.weight = kaiming_uniform(rng, (in_channels, out_channels, 2, 2), in_channels * 4)
        self.bias = zeros(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2x2(x, self.weight, self.bias)


class LayerNorm2d(Module):
    """Channel-axis LayerNorm at each spatial position of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = ones(channels)
        self.beta = zeros(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, eps=self.eps)
