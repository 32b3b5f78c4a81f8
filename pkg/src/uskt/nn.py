"""Parameter containers and the few layer types the network uses.

``Module`` discovers parameters by walking attributes in insertion
order (Tensors are parameters, Modules and lists of Modules recurse),
which gives bundles and optimizers a stable, deterministic ordering.
"""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, linear


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal parameter container with deterministic traversal order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def trainable_param_count(self) -> int:
        return sum(t.size for t in self.parameters() if t.requires_grad)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def checksum(self, include: str | None = None, exclude: str | None = None) -> str:
        """SHA-256 over parameter bytes, name-filtered by substring."""
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            if include is not None and include not in name:
                continue
            if exclude is not None and exclude in name:
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, dtype=np.float32) -> None:
        self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features),
                                             in_features, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dtype=np.float32) -> None:
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel),
                                             fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dtype=np.float32) -> None:
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, (in_channels, out_channels, kernel, kernel),
                                             fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                    padding=self.padding)


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32) -> None:
        self.weight = Tensor(kaiming_uniform(rng, (channels, kernel), kernel, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d_depthwise(x, self.weight, self.bias)
