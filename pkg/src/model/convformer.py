"""
ConvFormer Assembly.

Encoder:
    conv stem (1/2) -> three residual-shaped hybrid stems (1/4, 1/8, 1/16)
    Each hybrid stem downsamples with a stride-2 conv, then adds a local branch (stacked
    conv blocks with an identity residual) and a global branch (a single-level Enhanced
    DeTrans block over the downsampled map).

Additional encoder (optional):
    The three coarse maps are projected to a common width, passed through a multi-scale
    Enhanced DeTrans encoder with input-to-output residuals, and projected back. The
    results replace the maps as decoder skips.

Decoder:
    Three DeConv stems (x2 upsample, concat skip, two conv blocks), a final x2 DeConv to
    full resolution and a 1x1 head.
"""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

from src.errors import ConfigError, DimensionError
from src.model.config import ModelConfig
from src.model.deform_attn import MultiScaleFeatures
from src.model.detrans import EnhancedDeTransEncoder, enhanced_detrans_encoder
from src.model.layers import Conv2d, ConvBNReLU, ConvTranspose2d, Module
from src.tensor.parameters import ParameterStore
from src.tensor.tensor import Tensor, concat

logger = logging.getLogger(__name__)


class SegLogits:
    """Per-pixel class logits [B, num_classes, H, W] at input resolution."""

    def __init__(self, logits: Tensor, input_shape: Optional[Tuple[int, int]] = None):
        if logits.ndim != 4:
            raise DimensionError(f"logits must be [B, K, H, W], got {logits.shape}")
        if input_shape is not None and tuple(logits.shape[2:]) != tuple(input_shape):
            raise DimensionError(f"logits {logits.shape[2:]} do not match input {input_shape}")
        self.logits = logits

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.logits.shape

    def argmax(self):
        return self.logits.data.argmax(axis=1)


class ConvStem(Module):
    def __init__(self, store: ParameterStore, name: str, cfg: ModelConfig):
        super().__init__(store, name)
        c1 = cfg.stage_channels[0]
        self.down = self.child(ConvBNReLU(store, self.scope("down"), cfg.in_channels, c1, stride=2, bn_momentum=cfg.bn_momentum))
        self.blocks = [
            self.child(ConvBNReLU(store, self.scope(f"blocks.{i}"), c1, c1, bn_momentum=cfg.bn_momentum))
            for i in range(cfg.stem_conv_blocks)
        ]


def conv_stem(x: Tensor, stem: ConvStem) -> Tensor:
    """
    Stride-2 conv-BN-ReLU followed by the stem conv blocks: [B, Cin, H, W] -> [B, C1, H/2, W/2].

    Raises:
        ConfigError: H or W not divisible by 16.
    """
    if x.ndim != 4:
        raise DimensionError(f"input must be [B, C, H, W], got {x.shape}")
    height, width = x.shape[2:]
    if height % 16 or width % 16 or height == 0 or width == 0:
        raise ConfigError(f"input size {height}x{width} must be divisible by 16", key="image_size")
    out = stem.down(x)
    for block in stem.blocks:
        out = block(out)
    return out


class ResidualHybridStem(Module):
    """
    One encoder stage: downsample, local conv branch, global Enhanced DeTrans branch.

    Attributes:
        global_branch (Optional[EnhancedDeTransEncoder]): Single-level block, None without DeTrans.
        use_residual (bool): Identity residual around the local conv blocks.
    """

    def __init__(self, store: ParameterStore, name: str, in_channels: int, out_channels: int, cfg: ModelConfig):
        super().__init__(store, name)
        self.down = self.child(
            ConvBNReLU(store, self.scope("down"), in_channels, out_channels, stride=2, bn_momentum=cfg.bn_momentum)
        )
        self.blocks = [
            self.child(ConvBNReLU(store, self.scope(f"blocks.{i}"), out_channels, out_channels, bn_momentum=cfg.bn_momentum))
            for i in range(cfg.stem_conv_blocks)
        ]
        self.use_residual = cfg.use_stem_residuals
        self.global_branch: Optional[EnhancedDeTransEncoder] = None
        if cfg.use_detrans:
            self.global_branch = self.child(
                EnhancedDeTransEncoder(
                    store,
                    self.scope("detrans"),
                    out_channels,
                    num_levels=1,
                    n_layers=cfg.stem_detrans_layers,
                    num_heads=cfg.num_heads,
                    num_points=cfg.num_points,
                    expansion=cfg.ffm_expansion,
                    use_conv_ffm=cfg.use_conv_ffm,
                    use_epe=False,
                    use_level_embed=False,
                    use_residual=False,
                    bn_momentum=cfg.bn_momentum,
                )
            )


def residual_hybrid_stem(x: Tensor, stem: ResidualHybridStem) -> Tensor:
    """[B, C, H, W] -> [B, C', H/2, W/2] = local branch + global branch."""
    down = stem.down(x)
    local = down
    for block in stem.blocks:
        local = block(local)
    if stem.use_residual:
        local = local + down
    if stem.global_branch is None:
        return local
    global_ = enhanced_detrans_encoder(MultiScaleFeatures([down]), stem.global_branch).levels[0]
    return local + global_


class AdditionalEncoder(Module):
    """Projections around the multi-scale Enhanced DeTrans encoder."""

    def __init__(self, store: ParameterStore, name: str, cfg: ModelConfig):
        super().__init__(store, name)
        widths = cfg.stage_channels[1:]
        width = cfg.encoder_channels
        self.input_proj = [
            self.child(Conv2d(store, self.scope(f"input_proj.{l}"), c, width, kernel_size=1)) for l, c in enumerate(widths)
        ]
        self.encoder = self.child(
            EnhancedDeTransEncoder(
                store,
                self.scope("encoder"),
                width,
                num_levels=len(widths),
                n_layers=cfg.encoder_layers,
                num_heads=cfg.num_heads,
                num_points=cfg.num_points,
                expansion=cfg.ffm_expansion,
                use_conv_ffm=cfg.use_conv_ffm,
                use_epe=cfg.use_epe,
                use_level_embed=cfg.use_level_embed,
                use_residual=True,
                bn_momentum=cfg.bn_momentum,
            )
        )
        self.output_proj = [
            self.child(Conv2d(store, self.scope(f"output_proj.{l}"), width, c, kernel_size=1)) for l, c in enumerate(widths)
        ]

    def __call__(self, maps: Sequence[Tensor]) -> List[Tensor]:
        """Stage maps of increasing width in, maps of the same widths out."""
        if len(maps) != len(self.input_proj):
            raise DimensionError(f"expected {len(self.input_proj)} stage maps, got {len(maps)}")
        projected = MultiScaleFeatures([proj(level) for proj, level in zip(self.input_proj, maps)])
        encoded = enhanced_detrans_encoder(projected, self.encoder)
        return [proj(level) for proj, level in zip(self.output_proj, encoded.levels)]


class DecoderStem(Module):
    """x2 DeConv, concatenate the skip, two conv blocks."""

    def __init__(self, store: ParameterStore, name: str, in_channels: int, skip_channels: int, bn_momentum: float):
        super().__init__(store, name)
        self.up = self.child(ConvTranspose2d(store, self.scope("up"), in_channels, skip_channels))
        self.fuse = self.child(ConvBNReLU(store, self.scope("fuse"), 2 * skip_channels, skip_channels, bn_momentum=bn_momentum))
        self.refine = self.child(ConvBNReLU(store, self.scope("refine"), skip_channels, skip_channels, bn_momentum=bn_momentum))

    def __call__(self, x: Tensor, skip: Tensor) -> Tensor:
        return self.refine(self.fuse(concat([self.up(x), skip], axis=1)))


class ConvFormer(Module):
    """
    The full segmentation network.

    Args:
        cfg: Architecture and ablation switches.
        store: Parameter store to register into (a fresh one seeded with `seed` by default).
        seed: Initialization seed when `store` is omitted.
    """

    def __init__(self, cfg: ModelConfig, store: Optional[ParameterStore] = None, seed: int = 0):
        super().__init__(store if store is not None else ParameterStore(seed), "")
        self.cfg = cfg
        c = cfg.stage_channels
        self.stem = self.child(ConvStem(self.store, "stem", cfg))
        self.stages: List[ResidualHybridStem] = [
            self.child(ResidualHybridStem(self.store, f"stages.{i}", c[i], c[i + 1], cfg)) for i in range(3)
        ]
        self.additional: Optional[AdditionalEncoder] = None
        if cfg.use_additional_encoder:
            self.additional = self.child(AdditionalEncoder(self.store, "additional", cfg))
        self.decoder = [
            self.child(DecoderStem(self.store, f"decoder.{i}", c[3 - i], c[2 - i], cfg.bn_momentum)) for i in range(3)
        ]
        self.final_up = self.child(ConvTranspose2d(self.store, "final_up", c[0], c[0]))
        self.head = self.child(Conv2d(self.store, "head", c[0], cfg.num_classes, kernel_size=1))
        logger.debug(f"MODEL: {cfg.variant_name() or 'custom'} | PARAMS: {self.num_parameters()}")

    def __call__(self, x: Tensor) -> SegLogits:
        return convformer_forward(x, self)


def encoder_forward(x: Tensor, model: ConvFormer) -> Tuple[List[Tensor], Tensor]:
    """Stage maps at 1/4, 1/8, 1/16 (widths c2, c3, c4) plus the 1/2 stem map."""
    stem_map = conv_stem(x, model.stem)
    maps = []
    out = stem_map
    for stage in model.stages:
        out = residual_hybrid_stem(out, stage)
        maps.append(out)
    return maps, stem_map


def convformer_forward(x: Tensor, model: ConvFormer) -> SegLogits:
    """
    Full forward pass: [B, Cin, H, W] -> logits [B, num_classes, H, W].

    Raises:
        ConfigError: H or W not divisible by 16, or channel count differs from the config.
    """
    if x.ndim != 4 or x.shape[1] != model.cfg.in_channels:
        raise ConfigError(f"input {x.shape} does not match in_channels={model.cfg.in_channels}", key="in_channels")
    pyramid, stem_map = encoder_forward(x, model)
    if model.additional is not None:
        pyramid = model.additional(pyramid)
    skips = [stem_map, pyramid[0], pyramid[1]]
    out = pyramid[2]
    for stem, skip in zip(model.decoder, reversed(skips)):
        out = stem(out, skip)
    logits = model.head(model.final_up(out))
    return SegLogits(logits, input_shape=x.shape[2:])
