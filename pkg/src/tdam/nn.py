"""Parameter containers: a small module tree with conv, batch norm and linear layers."""
from __future__ import annotations

import zlib
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """A leaf tensor that is trained. ``role`` is ``"weight"``, ``"bias"`` or ``"bn"``."""

    __slots__ = ("role",)

    def __init__(self, data, role: str = "weight"):
        super().__init__(data, requires_grad=True)
        self.role = role


class Module:
    training = True
    #: cost category of the parameters owned directly by this module
    category = "backbone"

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            yield from _walk_children(key, value)

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules():
            for key, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{mod_name}.{key}" if mod_name else key), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules():
            for key in getattr(mod, "buffers", ()):
                yield (f"{mod_name}.{key}" if mod_name else key), getattr(mod, key)

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def init_weights(self, seed: int) -> None:
        """Kaiming-uniform (fan-in) weights, zero biases, unit BN scale.

        Every parameter draws from its own stream keyed by (seed, name), so
        adding a module never shifts the initialization of the others.
        """
        for name, p in self.named_parameters():
            if p.role == "weight":
                fan_in = int(np.prod(p.shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
                p.data[...] = rng.uniform(-bound, bound, size=p.shape)
            elif p.role == "bn" and name.endswith(".weight"):
                p.data[...] = 1
            else:
                p.data[...] = 0


def _walk_children(key, value):
    if isinstance(value, Module):
        yield key, value
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_children(f"{key}.{i}", item)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, pad: int = 0, bias: bool = False):
        dt = get_default_dtype()
        self.in_ch, self.out_ch, self.k, self.stride, self.pad = in_ch, out_ch, k, stride, pad
        self.weight = Parameter(np.zeros((out_ch, in_ch, k, k), dtype=dt))
        self.bias = Parameter(np.zeros(out_ch, dtype=dt), role="bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            ops.conv_out_size(h, self.k, self.stride, self.pad),
            ops.conv_out_size(w, self.k, self.stride, self.pad),
        )

    def macs(self, h: int, w: int) -> int:
        oh, ow = self.out_hw(h, w)
        return self.out_ch * oh * ow * self.in_ch * self.k * self.k


class BatchNorm2d(Module):
    buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        dt = get_default_dtype()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.weight = Parameter(np.ones(channels, dtype=dt), role="bn")
        self.bias = Parameter(np.zeros(channels, dtype=dt), role="bn")
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, bias: bool = True):
        dt = get_default_dtype()
        self.in_f, self.out_f = in_f, out_f
        self.weight = Parameter(np.zeros((out_f, in_f), dtype=dt))
        self.bias: Optional[Parameter] = Parameter(np.zeros(out_f, dtype=dt), role="bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    def macs(self) -> int:
        return self.in_f * self.out_f
