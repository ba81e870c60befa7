"""
Differentiable Primitives.

Every layer of the network is assembled from the functions in this module. Each one is
a thin wrapper around a `Function` subclass that carries an analytic backward pass:

- Convolutions: `conv2d`, `dwconv2d` (depthwise), `transpose_conv2d` (k == stride).
- Dense: `linear` (trailing-axis contraction).
- Normalization: `layer_norm` (trailing axis), `batch_norm` (over B, H, W with running stats).
- Nonlinearities: `gelu` (exact erf form), `relu`, `softmax`, `log_softmax`.
- Sampling: `bilinear_sample` (normalized points, border clamping, gradients to both inputs).

Reductions and normalization statistics are accumulated in float64 and cast back to the
input dtype on the way out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from src.errors import DimensionError, RangeError, StateError
from src.tensor.tensor import Function, Tensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _require_rank(name: str, array: np.ndarray, rank: int) -> None:
    if array.ndim != rank:
        raise DimensionError(f"{name}: expected rank {rank}, got shape {array.shape}")


def _check_bias(name: str, bias: Optional[np.ndarray], channels: int) -> None:
    if bias is not None and bias.shape != (channels,):
        raise DimensionError(f"{name}: bias shape {bias.shape} != ({channels},)")


# --- Convolutions ---


class Conv2d(Function):
    """Cross-correlation with square odd kernels, stride and symmetric zero padding."""

    def forward(self, x, weight, bias, stride: int = 1, padding: int = 0):
        _require_rank("conv2d input", x, 4)
        _require_rank("conv2d weight", weight, 4)
        batch, cin, height, width = x.shape
        cout, wcin, kh, kw = weight.shape
        if wcin != cin:
            raise DimensionError(f"conv2d: weight expects {wcin} input channels, got {cin}")
        if kh != kw or kh % 2 == 0:
            raise DimensionError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
        if stride < 1 or padding < 0:
            raise DimensionError(f"conv2d: invalid stride={stride} / padding={padding}")
        _check_bias("conv2d", bias, cout)
        k = kh
        out_h = (height + 2 * padding - k) // stride + 1
        out_w = (width + 2 * padding - k) // stride + 1
        if out_h < 1 or out_w < 1:
            raise DimensionError(f"conv2d: empty output for input {x.shape}, k={k}, stride={stride}")

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        windows = windows[:, :, :out_h, :out_w]
        out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias[None, :, None, None]

        self.x_shape = x.shape
        self.padded_shape = padded.shape
        self.windows, self.weight = windows, weight
        self.has_bias = bias is not None
        self.stride, self.padding, self.k = stride, padding, k
        return out

    def backward(self, grad):
        s, p, k = self.stride, self.padding, self.k
        _, _, out_h, out_w = grad.shape
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = grad.sum(axis=(0, 2, 3)) if self.has_bias else None

        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(grad, self.weight[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                grad_padded[:, :, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s] += contrib
        height, width = self.x_shape[2], self.x_shape[3]
        grad_x = grad_padded[:, :, p : p + height, p : p + width]
        return grad_x, grad_w, grad_b


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """
    2D cross-correlation.

    Args:
        x: Input [B, Cin, H, W].
        weight: Kernel [Cout, Cin, k, k], k odd.
        bias: Optional [Cout].
        stride: Step between windows.
        padding: Zero padding on every side.

    Returns:
        Tensor: [B, Cout, H', W'] with H' = floor((H + 2p - k) / stride) + 1.
    """
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


class DepthwiseConv2d(Function):
    """One k x k kernel per channel, spatial size preserved."""

    def forward(self, x, weight, bias, padding: int = 1):
        _require_rank("dwconv2d input", x, 4)
        _require_rank("dwconv2d weight", weight, 4)
        batch, channels, height, width = x.shape
        wc, one, kh, kw = weight.shape
        if wc != channels or one != 1:
            raise DimensionError(f"dwconv2d: weight shape {weight.shape} does not fit {channels} channels")
        if kh != kw or kh % 2 == 0:
            raise DimensionError(f"dwconv2d: kernel must be square and odd, got {kh}x{kw}")
        if padding != (kh - 1) // 2:
            raise DimensionError(f"dwconv2d: padding must be {(kh - 1) // 2} for k={kh}, got {padding}")
        _check_bias("dwconv2d", bias, channels)

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        out = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                out += padded[:, :, i : i + height, j : j + width] * weight[None, :, 0, i, j, None, None]
        if bias is not None:
            out = out + bias[None, :, None, None]

        self.padded, self.weight = padded, weight
        self.has_bias = bias is not None
        self.padding = padding
        return out

    def backward(self, grad):
        _, _, height, width = grad.shape
        k = self.weight.shape[2]
        grad_padded = np.zeros_like(self.padded, dtype=grad.dtype)
        grad_w = np.zeros(self.weight.shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i : i + height, j : j + width] += grad * self.weight[None, :, 0, i, j, None, None]
                grad_w[:, 0, i, j] = (grad * self.padded[:, :, i : i + height, j : j + width]).sum(axis=(0, 2, 3))
        p = self.padding
        grad_x = grad_padded[:, :, p : p + height, p : p + width]
        grad_b = grad.sum(axis=(0, 2, 3)) if self.has_bias else None
        return grad_x, grad_w, grad_b


def dwconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: Optional[int] = None) -> Tensor:
    """Depthwise convolution. `weight` is [C, 1, k, k]; padding defaults to (k - 1) / 2."""
    if padding is None:
        padding = (weight.shape[2] - 1) // 2
    return DepthwiseConv2d.apply(x, weight, bias, padding=padding)


class TransposeConv2d(Function):
    """Non-overlapping transposed convolution (kernel size equals stride)."""

    def forward(self, x, weight, bias, stride: int = 2):
        _require_rank("transpose_conv2d input", x, 4)
        _require_rank("transpose_conv2d weight", weight, 4)
        batch, cin, height, width = x.shape
        wcin, cout, kh, kw = weight.shape
        if wcin != cin:
            raise DimensionError(f"transpose_conv2d: weight expects {wcin} input channels, got {cin}")
        if kh != kw or kh != stride:
            raise DimensionError(f"transpose_conv2d: kernel {kh}x{kw} must equal stride {stride}")
        _check_bias("transpose_conv2d", bias, cout)
        k = kh
        out = np.tensordot(x, weight, axes=([1], [0]))  # B, H, W, Cout, k, k
        out = out.transpose(0, 3, 1, 4, 2, 5).reshape(batch, cout, height * k, width * k)
        if bias is not None:
            out = out + bias[None, :, None, None]
        self.x, self.weight = x, weight
        self.has_bias = bias is not None
        return out

    def backward(self, grad):
        batch, cin, height, width = self.x.shape
        _, cout, k, _ = self.weight.shape
        blocks = grad.reshape(batch, cout, height, k, width, k)
        grad_x = np.tensordot(blocks, self.weight, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        grad_w = np.tensordot(self.x, blocks, axes=([0, 2, 3], [0, 2, 4]))
        grad_b = grad.sum(axis=(0, 2, 3)) if self.has_bias else None
        return grad_x, grad_w, grad_b


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Upsample [B, Cin, H, W] to [B, Cout, H*stride, W*stride]; `weight` is [Cin, Cout, k, k] with k == stride."""
    return TransposeConv2d.apply(x, weight, bias, stride=stride)


# --- Dense ---


class Linear(Function):
    def forward(self, x, weight, bias):
        _require_rank("linear weight", weight, 2)
        if x.ndim < 1 or x.shape[-1] != weight.shape[0]:
            raise DimensionError(f"linear: trailing dim of {x.shape} does not match weight {weight.shape}")
        _check_bias("linear", bias, weight.shape[1])
        self.x, self.weight = x, weight
        self.has_bias = bias is not None
        out = x @ weight
        return out + bias if bias is not None else out

    def backward(self, grad):
        din, dout = self.weight.shape
        flat_grad = grad.reshape(-1, dout)
        grad_x = grad @ self.weight.T
        grad_w = self.x.reshape(-1, din).T @ flat_grad
        grad_b = flat_grad.sum(axis=0) if self.has_bias else None
        return grad_x, grad_w, grad_b


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ W + b over the trailing axis. `weight` is [Din, Dout]."""
    return Linear.apply(x, weight, bias)


# --- Normalization ---


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps: float = 1e-5):
        if x.ndim < 1 or x.shape[-1] == 0:
            raise DimensionError(f"layer_norm: trailing channel axis must be non-empty, got {x.shape}")
        channels = x.shape[-1]
        if gamma.shape != (channels,) or beta.shape != (channels,):
            raise DimensionError(f"layer_norm: affine params must be ({channels},)")
        if eps < 0:
            raise RangeError(f"layer_norm: eps must be >= 0, got {eps}")
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=-1, keepdims=True)
        centered = x64 - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_std = 1.0 / np.sqrt(var + eps)
            x_hat = centered * inv_std
        self.x_hat, self.inv_std, self.gamma = x_hat, inv_std, gamma
        return x_hat * gamma + beta

    def backward(self, grad):
        g64 = grad.astype(np.float64)
        reduce_axes = tuple(range(g64.ndim - 1))
        grad_gamma = (g64 * self.x_hat).sum(axis=reduce_axes)
        grad_beta = g64.sum(axis=reduce_axes)
        g_hat = g64 * self.gamma
        grad_x = self.inv_std * (
            g_hat
            - g_hat.mean(axis=-1, keepdims=True)
            - self.x_hat * (g_hat * self.x_hat).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing channel axis: (x - mean) / sqrt(var + eps) * gamma + beta."""
    return LayerNorm.apply(x, gamma, beta, eps=eps)


@dataclass
class RunningStats:
    """Per-channel running mean / variance of a batch norm layer (updated in place in train mode)."""

    mean: np.ndarray
    var: np.ndarray
    num_batches: int = field(default=0)

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=dtype), var=np.ones(channels, dtype=dtype))


class BatchNorm(Function):
    def forward(
        self,
        x,
        gamma,
        beta,
        stats: Optional[RunningStats] = None,
        training: bool = True,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        _require_rank("batch_norm input", x, 4)
        channels = x.shape[1]
        if gamma.shape != (channels,) or beta.shape != (channels,):
            raise DimensionError(f"batch_norm: affine params must be ({channels},)")
        if eps < 0:
            raise RangeError(f"batch_norm: eps must be >= 0, got {eps}")
        x64 = x.astype(np.float64)
        self.training = training
        if training:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x64.mean(axis=(0, 2, 3))
            var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
            if stats is not None:
                unbiased = var * count / (count - 1) if count > 1 else var
                stats.mean[...] = (1.0 - momentum) * stats.mean + momentum * mean
                stats.var[...] = (1.0 - momentum) * stats.var + momentum * unbiased
                stats.num_batches += 1
        else:
            if stats is None:
                raise StateError("batch_norm: eval mode requires running statistics")
            mean = stats.mean.astype(np.float64)
            var = stats.var.astype(np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_std = 1.0 / np.sqrt(var + eps)
            x_hat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self.x_hat, self.inv_std, self.gamma = x_hat, inv_std, gamma
        return x_hat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad):
        g64 = grad.astype(np.float64)
        axes = (0, 2, 3)
        grad_gamma = (g64 * self.x_hat).sum(axis=axes)
        grad_beta = g64.sum(axis=axes)
        g_hat = g64 * self.gamma[None, :, None, None]
        inv_std = self.inv_std[None, :, None, None]
        if self.training:
            grad_x = inv_std * (
                g_hat
                - g_hat.mean(axis=axes, keepdims=True)
                - self.x_hat * (g_hat * self.x_hat).mean(axis=axes, keepdims=True)
            )
        else:
            grad_x = g_hat * inv_std
        return grad_x, grad_gamma, grad_beta


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: Optional[RunningStats] = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """
    Batch normalization over (B, H, W) per channel.

    Train mode normalizes with batch statistics and, when `stats` is given, folds them into
    the running estimates (unbiased variance). Eval mode normalizes with `stats`.

    Raises:
        StateError: Eval mode without running statistics.
    """
    return BatchNorm.apply(x, gamma, beta, stats=stats, training=training, momentum=momentum, eps=eps)


# --- Nonlinearities ---


class Gelu(Function):
    def forward(self, x):
        x64 = x.astype(np.float64)
        self.cdf = 0.5 * (1.0 + erf(x64 / _SQRT2))
        self.x64 = x64
        return x64 * self.cdf

    def backward(self, grad):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * self.x64 * self.x64)
        return (grad * (self.cdf + self.x64 * pdf),)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU: x * Phi(x)."""
    return Gelu.apply(x)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0)

    def backward(self, grad):
        return (np.where(self.mask, grad, 0),)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


class Softmax(Function):
    def forward(self, x, axis: int = -1):
        x64 = x.astype(np.float64)
        shifted = np.exp(x64 - x64.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        self.axis = axis
        return self.out

    def backward(self, grad):
        g64 = grad.astype(np.float64)
        inner = (g64 * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (g64 - inner),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis` (trailing by default)."""
    return Softmax.apply(x, axis=axis)


class LogSoftmax(Function):
    def forward(self, x, axis: int = -1):
        x64 = x.astype(np.float64)
        shifted = x64 - x64.max(axis=axis, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        self.out = shifted - log_norm
        self.axis = axis
        return self.out

    def backward(self, grad):
        g64 = grad.astype(np.float64)
        probs = np.exp(self.out)
        return (g64 - probs * g64.sum(axis=self.axis, keepdims=True),)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


# --- Sampling ---


def _axis_interp(coords: np.ndarray, extent: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pixel-space lower/upper neighbors, fractional weight and in-range mask along one axis."""
    raw = coords * extent - 0.5
    in_range = (raw >= 0.0) & (raw <= extent - 1)
    pos = np.clip(raw, 0.0, extent - 1)
    lower = np.clip(np.floor(pos), 0, max(extent - 2, 0)).astype(np.int64)
    upper = np.minimum(lower + 1, extent - 1)
    frac = pos - lower
    return lower, upper, frac, in_range


class BilinearSample(Function):
    def forward(self, featmap, points):
        _require_rank("bilinear_sample featmap", featmap, 4)
        _require_rank("bilinear_sample points", points, 3)
        batch, channels, height, width = featmap.shape
        if height == 0 or width == 0:
            raise DimensionError(f"bilinear_sample: empty feature map {featmap.shape}")
        if points.shape[0] != batch or points.shape[2] != 2:
            raise DimensionError(f"bilinear_sample: points {points.shape} do not match batch {batch}")

        y0, y1, wy, in_y = _axis_interp(points[..., 0].astype(np.float64), height)
        x0, x1, wx, in_x = _axis_interp(points[..., 1].astype(np.float64), width)
        bidx = np.broadcast_to(np.arange(batch)[:, None], y0.shape)
        fm = featmap.transpose(0, 2, 3, 1)
        v00, v01 = fm[bidx, y0, x0], fm[bidx, y0, x1]
        v10, v11 = fm[bidx, y1, x0], fm[bidx, y1, x1]
        wy_, wx_ = wy[..., None], wx[..., None]
        out = (1 - wy_) * ((1 - wx_) * v00 + wx_ * v01) + wy_ * ((1 - wx_) * v10 + wx_ * v11)

        self.shape = featmap.shape
        self.index = (bidx, y0, y1, x0, x1)
        self.weights = (wy, wx)
        self.corners = (v00, v01, v10, v11)
        self.in_range = (in_y, in_x)
        return out

    def backward(self, grad):
        batch, channels, height, width = self.shape
        bidx, y0, y1, x0, x1 = self.index
        wy, wx = self.weights
        v00, v01, v10, v11 = self.corners
        in_y, in_x = self.in_range
        g64 = grad.astype(np.float64)
        wy_, wx_ = wy[..., None], wx[..., None]

        grad_fm = np.zeros((batch, height, width, channels), dtype=np.float64)
        np.add.at(grad_fm, (bidx, y0, x0), g64 * (1 - wy_) * (1 - wx_))
        np.add.at(grad_fm, (bidx, y0, x1), g64 * (1 - wy_) * wx_)
        np.add.at(grad_fm, (bidx, y1, x0), g64 * wy_ * (1 - wx_))
        np.add.at(grad_fm, (bidx, y1, x1), g64 * wy_ * wx_)

        d_wy = ((1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)) * g64
        d_wx = ((1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)) * g64
        grad_points = np.stack(
            [d_wy.sum(axis=-1) * height * in_y, d_wx.sum(axis=-1) * width * in_x],
            axis=-1,
        )
        return grad_fm.transpose(0, 3, 1, 2), grad_points


def bilinear_sample(featmap: Tensor, points: Tensor) -> Tensor:
    """
    Sample `featmap` [B, C, H, W] at normalized (y, x) `points` [B, P, 2].

    Pixel i has its center at (i + 0.5) / H. Points outside the centers' hull are clamped to
    the border, so their coordinate gradient is zero.

    Returns:
        Tensor: [B, P, C].
    """
    return BilinearSample.apply(featmap, points)
