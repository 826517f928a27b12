"""Parameterised building blocks on top of the autodiff primitives."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from ..autodiff import Tensor, ops

GROUP_SIZE = 8


class Module:
    """Parameter container; children and parameters are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: Optional[int] = None, bias: bool = True):
        self.weight = _he(rng, (cout, cin, k, k), cin * k * k)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """Stride-2 up-sampling: kernel 4 / pad 1 or kernel 2 / pad 0 both double the size."""

    def __init__(self, rng, cin: int, cout: int, k: int = 4, bias: bool = True):
        if k not in (2, 4):
            raise ValueError("transposed conv kernel must be 2 or 4 for exact doubling")
        # fan-in of a stride-2 transposed conv: each output sees cin * (k/2)^2 taps
        self.weight = _he(rng, (cin, cout, k, k), cin * (k // 2) ** 2)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.padding = (k - 2) // 2

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=2, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x):
        return ops.group_norm(x, self.weight, self.bias, group_size=GROUP_SIZE)


class Linear(Module):
    def __init__(self, rng, fin: int, fout: int):
        self.weight = _he(rng, (fin, fout), fin)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def forward(self, x):
        return ops.add(ops.matmul(x, self.weight), self.bias)


class BasicBlock(Module):
    """Two 3x3 convs with a residual connection; optional stride-2 down-sampling."""

    def __init__(self, rng, cin: int, cout: int, stride: int = 1):
        self.conv1 = Conv2d(rng, cin, cout, 3, stride, bias=False)
        self.norm1 = GroupNorm(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3, 1, bias=False)
        self.norm2 = GroupNorm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = Conv2d(rng, cin, cout, 1, stride, padding=0, bias=False)
            self.shortcut_norm = GroupNorm(cout)

    def forward(self, x):
        y = ops.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        skip = x if self.shortcut is None else self.shortcut_norm(self.shortcut(x))
        return ops.relu(ops.add(y, skip))


class UpBlock(Module):
    """Residual block whose first conv is a stride-2 transposed conv."""

    def __init__(self, rng, cin: int, cout: int):
        self.up = ConvTranspose2d(rng, cin, cout, 4, bias=False)
        self.norm1 = GroupNorm(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3, 1, bias=False)
        self.norm2 = GroupNorm(cout)
        self.shortcut = ConvTranspose2d(rng, cin, cout, 2, bias=False)
        self.shortcut_norm = GroupNorm(cout)

    def forward(self, x):
        y = ops.relu(self.norm1(self.up(x)))
        y = self.norm2(self.conv2(y))
        return ops.relu(ops.add(y, self.shortcut_norm(self.shortcut(x))))
