"""
Enhanced DeTrans.

One layer is a post-norm transformer block over a flattened pyramid:

    y   = LN(x + MS-MHSA(x, pos, unflatten(x), refs))
    out = reshape(DWConv(reshape(FFM(y))))        (Conv-based FFM)
    FFM(x) = LN(GELU(x W1 + b1) W2 + b2 + x)

The depthwise conv of the Conv-based FFM is a single kernel shared by every level. With
`use_conv_ffm` off the layer ends at the plain FFM.

The encoder stacks n such layers. Its positional embedding is either the enhanced
encoding (fixed map plus content branch) or the fixed map alone, optionally plus one
learned vector per level. With `use_residual` the encoder input maps are added back to
its output maps.
"""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.errors import DimensionError
from src.model.deform_attn import (
    MsMhsaParams,
    MultiScaleFeatures,
    ReferencePoints,
    flatten_multiscale,
    make_reference_points,
    ms_mhsa,
    unflatten_multiscale,
)
from src.model.layers import DepthwiseConv2d, LayerNorm, Linear, Module
from src.model.positional import EnhancedPositionalEncoding, PositionalGrid
from src.tensor import functional as F
from src.tensor.parameters import ParameterStore
from src.tensor.tensor import Tensor

logger = logging.getLogger(__name__)


class FeedForwardParams(Module):
    """W1, b1, W2, b2 and the layer norm of the feed-forward module."""

    def __init__(self, store: ParameterStore, name: str, channels: int, expansion: int = 4):
        super().__init__(store, name)
        self.channels = channels
        self.hidden = channels * expansion
        self.fc1 = self.child(Linear(store, self.scope("fc1"), channels, self.hidden))
        self.fc2 = self.child(Linear(store, self.scope("fc2"), self.hidden, channels))
        self.norm = self.child(LayerNorm(store, self.scope("norm"), channels))


def ffm(x: Tensor, params: FeedForwardParams) -> Tensor:
    """LN(GELU(x W1 + b1) W2 + b2 + x) over [B, S, C] tokens."""
    if x.shape[-1] != params.channels:
        raise DimensionError(f"ffm: expected {params.channels} channels, got {x.shape}")
    return params.norm(params.fc2(F.gelu(params.fc1(x))) + x)


def conv_based_ffm(
    x: Tensor,
    level_shapes: Sequence[Tuple[int, int]],
    params: FeedForwardParams,
    dw: DepthwiseConv2d,
) -> Tensor:
    """
    FFM followed by the shared depthwise conv applied to every unflattened level.

    No residual is added around the depthwise conv.
    """
    tokens = ffm(x, params)
    ms = unflatten_multiscale(tokens, level_shapes)
    return flatten_multiscale(MultiScaleFeatures([dw(level) for level in ms.levels]))


class EnhancedDeTransLayer(Module):
    """
    Parameters of one Enhanced DeTrans layer.

    Attributes:
        attn (MsMhsaParams): Deformable attention projections.
        attn_norm (LayerNorm): Post-attention norm.
        ffm (FeedForwardParams): Feed-forward module.
        dw_ffm (Optional[DepthwiseConv2d]): Shared 3x3 kernel of the Conv-based FFM, None when disabled.
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        channels: int,
        num_levels: int,
        num_heads: int = 4,
        num_points: int = 4,
        expansion: int = 4,
        use_conv_ffm: bool = True,
    ):
        super().__init__(store, name)
        self.attn = self.child(MsMhsaParams(store, self.scope("attn"), channels, num_levels, num_heads, num_points))
        self.attn_norm = self.child(LayerNorm(store, self.scope("attn_norm"), channels))
        self.ffm = self.child(FeedForwardParams(store, self.scope("ffm"), channels, expansion))
        self.dw_ffm: Optional[DepthwiseConv2d] = None
        if use_conv_ffm:
            self.dw_ffm = self.child(DepthwiseConv2d(store, self.scope("dw_ffm"), channels))


def enhanced_detrans_layer(
    x: Tensor,
    pos: Tensor,
    refs: ReferencePoints,
    level_shapes: Sequence[Tuple[int, int]],
    params: EnhancedDeTransLayer,
) -> Tensor:
    """One post-norm layer over [B, S, C] tokens."""
    attended = ms_mhsa(x, pos, unflatten_multiscale(x, level_shapes), refs, params.attn)
    y = params.attn_norm(x + attended)
    if params.dw_ffm is not None:
        return conv_based_ffm(y, level_shapes, params.ffm, params.dw_ffm)
    return ffm(y, params.ffm)


class EnhancedDeTransEncoder(Module):
    """
    A stack of Enhanced DeTrans layers over an L-level pyramid.

    Attributes:
        n_layers (int): Number of layers.
        use_epe (bool): Enhanced positional encoding (one DW Conv + BN per level) instead of
            the fixed map alone.
        use_level_embed (bool): Add a learned [L, C] level embedding to the positions.
        use_residual (bool): Add the encoder input maps to its output maps.
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        channels: int,
        num_levels: int,
        n_layers: int,
        num_heads: int = 4,
        num_points: int = 4,
        expansion: int = 4,
        use_conv_ffm: bool = True,
        use_epe: bool = False,
        use_level_embed: bool = False,
        use_residual: bool = False,
        bn_momentum: float = 0.1,
    ):
        super().__init__(store, name)
        self.channels, self.num_levels, self.n_layers = channels, num_levels, n_layers
        self.use_residual = use_residual
        # positions are only consumed by layers; a zero-depth encoder registers none
        self.use_epe = use_epe and n_layers > 0
        self.use_level_embed = use_level_embed and n_layers > 0
        self.grid: Optional[PositionalGrid] = None
        self.pos_encoders: List[EnhancedPositionalEncoding] = []
        if self.use_epe:
            self.pos_encoders = [
                self.child(EnhancedPositionalEncoding(store, self.scope(f"epe.{l}"), channels, bn_momentum))
                for l in range(num_levels)
            ]
        if self.use_level_embed:
            store.add(self.scope("level_embed"), store.rng.normal(0.0, 0.02, size=(num_levels, channels)).astype(np.float32))
        self.layers: List[EnhancedDeTransLayer] = [
            self.child(
                EnhancedDeTransLayer(
                    store,
                    self.scope(f"layers.{i}"),
                    channels,
                    num_levels,
                    num_heads,
                    num_points,
                    expansion,
                    use_conv_ffm,
                )
            )
            for i in range(n_layers)
        ]

    def fixed_grid(self, level_shapes: Sequence[Tuple[int, int]]) -> PositionalGrid:
        """Fixed maps for `level_shapes`, rebuilt only when the pyramid geometry changes."""
        if self.grid is None or self.grid.level_shapes != [tuple(s) for s in level_shapes]:
            self.grid = PositionalGrid(level_shapes, self.channels)
        return self.grid

    def positions(self, ms: MultiScaleFeatures) -> Tensor:
        """[B, S, C] positional embedding of every token."""
        grid = self.fixed_grid(ms.level_shapes)
        maps = []
        for level, x in enumerate(ms.levels):
            if self.use_epe:
                p = self.pos_encoders[level](x, grid[level])
            else:
                p = Tensor(np.broadcast_to(grid[level].data[None], x.shape), dtype=x.dtype)
            if self.use_level_embed:
                p = p + self.param("level_embed")[level].reshape(1, self.channels, 1, 1)
            maps.append(p)
        return flatten_multiscale(MultiScaleFeatures(maps))


def enhanced_detrans_encoder(ms: MultiScaleFeatures, params: EnhancedDeTransEncoder) -> MultiScaleFeatures:
    """
    Run the encoder over a pyramid.

    `params.n_layers`, `params.use_epe` and `params.use_residual` select depth, positional
    encoding and the input-to-output residual.

    Raises:
        DimensionError: Level count or width disagree with the encoder.
    """
    if ms.num_levels != params.num_levels or ms.channels != params.channels:
        raise DimensionError(
            f"encoder expects {params.num_levels} levels of width {params.channels}, "
            f"got {ms.num_levels} of width {ms.channels}"
        )
    tokens = flatten_multiscale(ms)
    if params.layers:
        pos = params.positions(ms)
        refs = make_reference_points(ms.level_shapes, ms.batch)
        for layer in params.layers:
            tokens = enhanced_detrans_layer(tokens, pos, refs, ms.level_shapes, layer)
    out = unflatten_multiscale(tokens, ms.level_shapes)
    if params.use_residual:
        return MultiScaleFeatures([o + i for o, i in zip(out.levels, ms.levels)])
    return out
