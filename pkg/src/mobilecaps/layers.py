"""Parameter-owning building blocks shared by the backbone and the capsule head."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Parameter, Tensor, ops


class Module:
    """Tree of parameters discovered from attributes in assignment order.

    Attributes holding a :class:`Parameter`, a :class:`Module`, or a list of
    modules are walked; parameter names are their dotted attribute paths.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        if unknown:
            raise KeyError(f"unknown parameter names: {unknown}")
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing}")
        for name, arr in state.items():
            p = own[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 1, stride: int = 1,
                 padding: str = "same", rng: np.random.Generator | None = None, bias: bool = False):
        rng = rng or np.random.default_rng(0)
        k = kernel_size
        self.in_channels, self.out_channels = in_channels, out_channels
        self.stride, self.padding = stride, padding
        self.kernel = Parameter(he_normal(rng, (k, k, in_channels, out_channels), k * k * in_channels))
        if bias:
            self.bias = Parameter(np.zeros(out_channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.kernel, self.stride, self.padding)
        if hasattr(self, "bias"):
            y = ops.add_bias(y, self.bias)
        return y


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel_size: int = 3, stride: int = 1, padding: str = "same",
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        k = kernel_size
        self.stride, self.padding = stride, padding
        self.kernel = Parameter(he_normal(rng, (k, k, channels), k * k))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.kernel, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.running_mean = Parameter(np.zeros(channels, dtype=np.float32), trainable=False)
        self.running_var = Parameter(np.ones(channels, dtype=np.float32), trainable=False)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        rng = rng or np.random.default_rng(0)
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.weight = Parameter(rng.uniform(-limit, limit, (in_features, out_features)).astype(np.float32))
        if bias:
            self.bias = Parameter(np.zeros(out_features, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        if hasattr(self, "bias"):
            y = ops.add_bias(y, self.bias)
        return y


def param_count(module: Module, trainable_only: bool = True, depth: int = 1) -> dict[str, int]:
    """Parameter totals grouped by the first ``depth`` path components, plus ``"total"``.

    ``depth=3`` on a model gives one row per backbone block (``features.blocks.4``).
    """
    counts: dict[str, int] = {}
    for name, p in module.named_parameters():
        if trainable_only and not p.trainable:
            continue
        parts = name.split(".")
        key = ".".join(parts[:depth]) if len(parts) > depth else ".".join(parts[:-1]) or name
        counts[key] = counts.get(key, 0) + p.size
    counts["total"] = sum(counts.values())
    return counts
