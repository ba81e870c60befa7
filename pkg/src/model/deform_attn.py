"""
Multi-Scale Multi-Head Deformable Self-Attention.

Every token attends to K learned sampling points on each of the L pyramid levels and
each of the M heads. Sampling offsets and attention weights are predicted from the
query (features plus positional embedding):

    loc[m, l, k] = ref[l] + offset[m, l, k] / (H_l, W_l)
    a[m, :, :]   = softmax over the L*K points
    out          = W_out( concat_m sum_{l,k} a[m,l,k] * bilinear(value_l^m, loc[m,l,k]) )

Offsets are predicted in pixel units of each level. The offset projection and the
attention-weight projection start at zero, so at initialization every head reads the
reference point of every level with uniform weight 1/(L*K).
"""

from __future__ import annotations

import logging
from typing import List, Sequence, Tuple

import numpy as np

from src.errors import ConfigError, DimensionError
from src.model.layers import Linear, Module
from src.tensor import functional as F
from src.tensor.parameters import ParameterStore
from src.tensor.tensor import Tensor, concat

logger = logging.getLogger(__name__)


class MultiScaleFeatures:
    """
    Ordered feature pyramid with flattening bookkeeping.

    Attributes:
        levels (List[Tensor]): [B, C, H_l, W_l] per level, all sharing B and C.
        level_shapes (List[Tuple[int, int]]): (H_l, W_l) per level.
        level_offsets (List[int]): Prefix sums of H_l*W_l; the last entry is the token count S.
    """

    def __init__(self, levels: Sequence[Tensor]):
        if not levels:
            raise DimensionError("MultiScaleFeatures needs at least one level")
        for level in levels:
            if level.ndim != 4:
                raise DimensionError(f"pyramid levels must be [B, C, H, W], got {level.shape}")
            if level.shape[2] == 0 or level.shape[3] == 0:
                raise DimensionError(f"empty pyramid level {level.shape}")
        batch, channels = levels[0].shape[:2]
        if any(l.shape[:2] != (batch, channels) for l in levels):
            raise DimensionError(f"pyramid levels disagree on (B, C): {[l.shape for l in levels]}")
        self.levels: List[Tensor] = list(levels)
        self.level_shapes: List[Tuple[int, int]] = [(l.shape[2], l.shape[3]) for l in levels]
        self.level_offsets: List[int] = [0]
        for h, w in self.level_shapes:
            self.level_offsets.append(self.level_offsets[-1] + h * w)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def num_tokens(self) -> int:
        return self.level_offsets[-1]

    @property
    def batch(self) -> int:
        return self.levels[0].shape[0]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> Tensor:
        return self.levels[index]


def level_offsets(level_shapes: Sequence[Tuple[int, int]]) -> List[int]:
    offsets = [0]
    for h, w in level_shapes:
        offsets.append(offsets[-1] + h * w)
    return offsets


def flatten_multiscale(ms: MultiScaleFeatures) -> Tensor:
    """[B, S, C] tokens: each level row-major, levels concatenated in pyramid order."""
    batch, channels = ms.batch, ms.channels
    parts = [level.reshape(batch, channels, -1).permute(0, 2, 1) for level in ms.levels]
    return parts[0] if len(parts) == 1 else concat(parts, axis=1)


def unflatten_multiscale(tokens: Tensor, level_shapes: Sequence[Tuple[int, int]]) -> MultiScaleFeatures:
    """Inverse of `flatten_multiscale`."""
    if tokens.ndim != 3:
        raise DimensionError(f"tokens must be [B, S, C], got {tokens.shape}")
    offsets = level_offsets(level_shapes)
    batch, count, channels = tokens.shape
    if offsets[-1] != count:
        raise DimensionError(f"token count {count} != sum of level sizes {offsets[-1]}")
    if len(level_shapes) == 1:
        h, w = level_shapes[0]
        return MultiScaleFeatures([tokens.permute(0, 2, 1).reshape(batch, channels, h, w)])
    levels = []
    for (h, w), start, stop in zip(level_shapes, offsets[:-1], offsets[1:]):
        levels.append(tokens[:, start:stop, :].permute(0, 2, 1).reshape(batch, channels, h, w))
    return MultiScaleFeatures(levels)


class ReferencePoints:
    """
    Normalized (y, x) reference points, [B, S, L, 2].

    Token t sits at its own pixel center ((row + 0.5) / H, (col + 0.5) / W) on the level it
    came from; the same point is used on every level.
    """

    def __init__(self, points: np.ndarray):
        if points.ndim != 4 or points.shape[-1] != 2:
            raise DimensionError(f"reference points must be [B, S, L, 2], got {points.shape}")
        self.points = points

    @property
    def num_levels(self) -> int:
        return self.points.shape[2]

    @property
    def num_tokens(self) -> int:
        return self.points.shape[1]


def make_reference_points(level_shapes: Sequence[Tuple[int, int]], batch_size: int = 1) -> ReferencePoints:
    if not level_shapes:
        raise DimensionError("make_reference_points needs at least one level")
    centers = []
    for h, w in level_shapes:
        ys = (np.arange(h, dtype=np.float64) + 0.5) / h
        xs = (np.arange(w, dtype=np.float64) + 0.5) / w
        grid = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)
        centers.append(grid)
    tokens = np.concatenate(centers, axis=0)  # S, 2
    num_levels = len(level_shapes)
    points = np.broadcast_to(tokens[None, :, None, :], (batch_size, tokens.shape[0], num_levels, 2))
    return ReferencePoints(np.ascontiguousarray(points, dtype=np.float32))


class MsMhsaParams(Module):
    """
    Projections of one deformable attention block.

    Attributes:
        num_heads (int): M.
        num_levels (int): L.
        num_points (int): K sampling points per level and head.
    """

    def __init__(
        self,
        store: ParameterStore,
        name: str,
        channels: int,
        num_levels: int,
        num_heads: int = 4,
        num_points: int = 4,
    ):
        super().__init__(store, name)
        if channels % num_heads != 0:
            raise ConfigError(f"channels ({channels}) must be divisible by heads ({num_heads})", key="num_heads")
        self.channels = channels
        self.num_heads, self.num_levels, self.num_points = num_heads, num_levels, num_points
        samples = num_heads * num_levels * num_points
        self.value_proj = self.child(Linear(store, self.scope("value_proj"), channels, channels))
        self.sampling_offsets = self.child(Linear(store, self.scope("sampling_offsets"), channels, samples * 2, zero_init=True))
        self.attention_weights = self.child(Linear(store, self.scope("attention_weights"), channels, samples, zero_init=True))
        self.output_proj = self.child(Linear(store, self.scope("output_proj"), channels, channels))


def sampling_locations(
    ref_points: np.ndarray,
    offsets: Tensor,
    level_shapes: Sequence[Tuple[int, int]],
) -> Tensor:
    """
    Normalized sampling locations.

    Args:
        ref_points: [B, S, L, 2] reference points.
        offsets: [B, S, M, L, K, 2] offsets in pixel units of each level.
        level_shapes: (H_l, W_l) per level.

    Returns:
        Tensor: [B, S, M, L, K, 2].
    """
    normalizer = np.array([[1.0 / h, 1.0 / w] for h, w in level_shapes], dtype=offsets.dtype)
    batch, count, num_levels, _ = ref_points.shape
    ref = Tensor(ref_points.reshape(batch, count, 1, num_levels, 1, 2), dtype=offsets.dtype)
    return ref + offsets * Tensor(normalizer.reshape(1, 1, 1, num_levels, 1, 2))


def sampling_plan(
    query: Tensor,
    pos_embed: Tensor,
    refs: ReferencePoints,
    level_shapes: Sequence[Tuple[int, int]],
    params: MsMhsaParams,
) -> Tuple[Tensor, Tensor]:
    """Sampling locations [B, S, M, L, K, 2] and attention weights [B, S, M, L, K] for `query`."""
    batch, count, _ = query.shape
    m, l, k = params.num_heads, params.num_levels, params.num_points
    q = query + pos_embed
    offsets = params.sampling_offsets(q).reshape(batch, count, m, l, k, 2)
    logits = params.attention_weights(q).reshape(batch, count, m, l * k)
    weights = F.softmax(logits, axis=-1).reshape(batch, count, m, l, k)
    return sampling_locations(refs.points, offsets, level_shapes), weights


def ms_mhsa(
    query: Tensor,
    pos_embed: Tensor,
    ms_values: MultiScaleFeatures,
    refs: ReferencePoints,
    params: MsMhsaParams,
) -> Tensor:
    """
    Multi-scale multi-head deformable self-attention.

    Args:
        query: [B, S, C] tokens aligned with the flattening of `ms_values`.
        pos_embed: [B, S, C] positional embedding added to the query.
        ms_values: Pyramid the values are sampled from.
        refs: Reference points [B, S, L, 2].
        params: Projections.

    Returns:
        Tensor: [B, S, C].

    Raises:
        DimensionError: Level counts of refs, values and params disagree, or the token count
            does not match the pyramid.
    """
    num_levels = ms_values.num_levels
    if refs.num_levels != num_levels or params.num_levels != num_levels:
        raise DimensionError(
            f"level count mismatch: values={num_levels} refs={refs.num_levels} params={params.num_levels}"
        )
    batch, count, channels = query.shape
    if count != ms_values.num_tokens or refs.num_tokens != count:
        raise DimensionError(f"query has {count} tokens, pyramid has {ms_values.num_tokens}")
    if pos_embed.shape != query.shape:
        raise DimensionError(f"pos_embed {pos_embed.shape} != query {query.shape}")

    heads, points = params.num_heads, params.num_points
    head_dim = channels // heads
    locations, weights = sampling_plan(query, pos_embed, refs, ms_values.level_shapes, params)
    value = params.value_proj(flatten_multiscale(ms_values))

    out = None
    for level, ((h, w), start, stop) in enumerate(
        zip(ms_values.level_shapes, ms_values.level_offsets[:-1], ms_values.level_offsets[1:])
    ):
        level_value = value if num_levels == 1 else value[:, start:stop, :]
        level_value = level_value.reshape(batch, h * w, heads, head_dim).permute(0, 2, 3, 1)
        level_value = level_value.reshape(batch * heads, head_dim, h, w)
        level_points = locations[:, :, :, level].permute(0, 2, 1, 3, 4).reshape(batch * heads, count * points, 2)
        sampled = F.bilinear_sample(level_value, level_points).reshape(batch, heads, count, points, head_dim)
        level_weights = weights[:, :, :, level].permute(0, 2, 1, 3).reshape(batch, heads, count, points, 1)
        contrib = (sampled * level_weights).sum(axis=3)
        out = contrib if out is None else out + contrib

    out = out.permute(0, 2, 1, 3).reshape(batch, count, channels)
    return params.output_proj(out)
