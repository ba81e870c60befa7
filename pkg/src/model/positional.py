"""
Positional Encodings.

- `sinusoidal_pe(H, W, C)`: fixed 2D sine/cosine map. The first C/2 channels encode the
  row index, the last C/2 the column index; within each half, channel 2i holds
  sin(pos / 10000^(2i / (C/2))) and channel 2i+1 the matching cosine.
- `epe(x, dw, bn)`: enhanced positional embedding, the fixed map of x's shape plus a
  content branch ReLU(BN(DWConv(x))). It is added to attention queries, never to the
  features themselves.
- `PositionalGrid`: per-level cache of fixed maps for a feature pyramid.
"""

from __future__ import annotations

import functools
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import ConfigError, DimensionError
from src.model.layers import BatchNorm2d, DepthwiseConv2d, Module
from src.tensor import functional as F
from src.tensor.parameters import ParameterStore
from src.tensor.tensor import Tensor

TEMPERATURE = 10000.0


def _axis_encoding(length: int, channels: int) -> np.ndarray:
    """[length, channels] sine/cosine table for one spatial axis."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(channels // 2, dtype=np.float64)[None, :]
    angle = pos / TEMPERATURE ** (2.0 * i / channels)
    table = np.empty((length, channels), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


@functools.lru_cache(maxsize=64)
def _pe_array(height: int, width: int, channels: int) -> np.ndarray:
    half = channels // 2
    rows = _axis_encoding(height, half)  # H, C/2
    cols = _axis_encoding(width, half)  # W, C/2
    pe = np.empty((channels, height, width), dtype=np.float32)
    pe[:half] = np.broadcast_to(rows.T[:, :, None], (half, height, width))
    pe[half:] = np.broadcast_to(cols.T[:, None, :], (half, height, width))
    pe.setflags(write=False)
    return pe


def sinusoidal_pe(height: int, width: int, channels: int) -> Tensor:
    """
    Fixed positional map of shape [C, H, W].

    Raises:
        ConfigError: C is not divisible by 4.
        DimensionError: H or W is not positive.
    """
    if channels <= 0 or channels % 4 != 0:
        raise ConfigError(f"positional channels must be a positive multiple of 4, got {channels}")
    if height <= 0 or width <= 0:
        raise DimensionError(f"positional map needs positive extents, got {height}x{width}")
    return Tensor(_pe_array(int(height), int(width), int(channels)))


class PositionalGrid:
    """Fixed encodings for every level of a pyramid, built once at construction."""

    def __init__(self, level_shapes: Sequence[Tuple[int, int]], channels: int):
        if not level_shapes:
            raise DimensionError("PositionalGrid needs at least one level")
        self.level_shapes: List[Tuple[int, int]] = [(int(h), int(w)) for h, w in level_shapes]
        self.channels = channels
        self.cache: Dict[int, Tensor] = {
            level: sinusoidal_pe(h, w, channels) for level, (h, w) in enumerate(self.level_shapes)
        }

    def __getitem__(self, level: int) -> Tensor:
        return self.cache[level]

    def __len__(self) -> int:
        return len(self.level_shapes)


def epe(x: Tensor, dw: DepthwiseConv2d, bn: BatchNorm2d, fixed: Optional[Tensor] = None) -> Tensor:
    """
    Enhanced positional embedding of a feature map.

    Args:
        x: Features [B, C, H, W].
        dw: 3x3 depthwise conv (spatial size preserved).
        bn: Batch norm over the dw output.
        fixed: Precomputed [C, H, W] fixed map (a `PositionalGrid` level); built when omitted.

    Returns:
        Tensor: [B, C, H, W] = sinusoidal_pe(H, W, C) + ReLU(BN(DWConv(x))).
    """
    _, channels, height, width = x.shape
    if fixed is None:
        fixed = sinusoidal_pe(height, width, channels)
    elif fixed.shape != (channels, height, width):
        raise DimensionError(f"fixed map {fixed.shape} does not match features {x.shape}")
    fixed = Tensor(fixed.data[None], dtype=x.dtype)
    return fixed + F.relu(bn(dw(x)))


class EnhancedPositionalEncoding(Module):
    """DW Conv + BN content branch for one pyramid level."""

    def __init__(self, store: ParameterStore, name: str, channels: int, bn_momentum: float = 0.1):
        super().__init__(store, name)
        self.dw = self.child(DepthwiseConv2d(store, self.scope("dw"), channels, bias=False))
        self.bn = self.child(BatchNorm2d(store, self.scope("bn"), channels, momentum=bn_momentum))

    def __call__(self, x: Tensor, fixed: Optional[Tensor] = None) -> Tensor:
        return epe(x, self.dw, self.bn, fixed)
