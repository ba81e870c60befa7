"""
Layer containers.

A `Module` is a named scope inside a `ParameterStore`. It registers its parameters at
construction and looks them up by name on every call, so `ParameterStore.override` can
substitute weights without rebuilding the network.
"""

from __future__ import annotations

from typing import Iterator, List, Optional

import numpy as np

from src.tensor import functional as F
from src.tensor.functional import RunningStats
from src.tensor.parameters import ParameterStore
from src.tensor.tensor import Tensor


class Module:
    """
    Base class for everything that owns parameters.

    Attributes:
        store (ParameterStore): Where parameters live.
        name (str): Dot-separated scope of this module ("" for the root).
        training (bool): Train/eval switch, consumed by batch norm.
    """

    def __init__(self, store: ParameterStore, name: str):
        self.store = store
        self.name = name
        self.training = True
        self._children: List[Module] = []

    def scope(self, suffix: str) -> str:
        return f"{self.name}.{suffix}" if self.name else suffix

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children:
            yield from child.modules()

    def param(self, suffix: str) -> Tensor:
        return self.store.value(self.scope(suffix))

    def parameter_names(self) -> List[str]:
        prefix = self.scope("")
        return [n for n in self.store.names() if not self.name or n.startswith(prefix)]

    def num_parameters(self) -> int:
        return self.store.num_parameters(self.name)

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Conv2d(Module):
    def __init__(
        self,
        store: ParameterStore,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        bias: bool = True,
    ):
        super().__init__(store, name)
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        self.has_bias = bias
        k = kernel_size
        store.glorot(self.scope("weight"), (out_channels, in_channels, k, k), in_channels * k * k, out_channels * k * k)
        if bias:
            store.zeros(self.scope("bias"), (out_channels,))

    def __call__(self, x: Tensor) -> Tensor:
        bias = self.param("bias") if self.has_bias else None
        return F.conv2d(x, self.param("weight"), bias, stride=self.stride, padding=self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, store: ParameterStore, name: str, channels: int, kernel_size: int = 3, bias: bool = True):
        super().__init__(store, name)
        self.has_bias = bias
        k = kernel_size
        store.glorot(self.scope("weight"), (channels, 1, k, k), k * k, k * k)
        if bias:
            store.zeros(self.scope("bias"), (channels,))

    def __call__(self, x: Tensor) -> Tensor:
        bias = self.param("bias") if self.has_bias else None
        return F.dwconv2d(x, self.param("weight"), bias)


class ConvTranspose2d(Module):
    """x2 (by default) non-overlapping upsampling."""

    def __init__(self, store: ParameterStore, name: str, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__(store, name)
        self.stride = stride
        k = stride
        store.glorot(self.scope("weight"), (in_channels, out_channels, k, k), in_channels * k * k, out_channels * k * k)
        store.zeros(self.scope("bias"), (out_channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.transpose_conv2d(x, self.param("weight"), self.param("bias"), stride=self.stride)


class Linear(Module):
    def __init__(
        self,
        store: ParameterStore,
        name: str,
        in_features: int,
        out_features: int,
        zero_init: bool = False,
    ):
        super().__init__(store, name)
        if zero_init:
            store.zeros(self.scope("weight"), (in_features, out_features))
        else:
            store.glorot(self.scope("weight"), (in_features, out_features), in_features, out_features)
        store.zeros(self.scope("bias"), (out_features,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.param("weight"), self.param("bias"))


class LayerNorm(Module):
    def __init__(self, store: ParameterStore, name: str, channels: int, eps: float = 1e-5):
        super().__init__(store, name)
        self.eps = eps
        store.ones(self.scope("weight"), (channels,))
        store.zeros(self.scope("bias"), (channels,))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.param("weight"), self.param("bias"), eps=self.eps)


class BatchNorm2d(Module):
    def __init__(self, store: ParameterStore, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__(store, name)
        self.momentum, self.eps = momentum, eps
        store.ones(self.scope("weight"), (channels,))
        store.zeros(self.scope("bias"), (channels,))
        self.stats = store.add_buffer(name, RunningStats.fresh(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.param("weight"),
            self.param("bias"),
            stats=self.stats,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvBNReLU(Module):
    """3x3 conv (no bias) -> batch norm -> ReLU."""

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        in_channels: int,
        out_channels: int,
        stride: int = 1,
        bn_momentum: float = 0.1,
    ):
        super().__init__(store, name)
        self.conv = self.child(Conv2d(store, self.scope("conv"), in_channels, out_channels, 3, stride=stride, bias=False))
        self.bn = self.child(BatchNorm2d(store, self.scope("bn"), out_channels, momentum=bn_momentum))

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


def identity_dw_kernel(channels: int, kernel_size: int = 3) -> np.ndarray:
    """Per-channel identity kernel (center 1, rest 0)."""
    kernel = np.zeros((channels, 1, kernel_size, kernel_size), dtype=np.float32)
    kernel[:, 0, kernel_size // 2, kernel_size // 2] = 1.0
    return kernel
