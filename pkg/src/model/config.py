"""
Model configuration and the ablation ladder.

`ModelConfig` carries the architecture hyperparameters plus five ablation switches. The
named variants reproduce the component ablation: each step up the ladder turns on one
more mechanism.

| variant            | detrans | conv_ffm | additional | epe | stem_residuals |
|--------------------|---------|----------|------------|-----|----------------|
| no_detrans         | F       | F        | F          | F   | T              |
| detrans            | T       | F        | F          | F   | T              |
| no_additional      | T       | T        | F          | F   | T              |
| no_epe             | T       | T        | T          | F   | T              |
| full               | T       | T        | T          | T   | T              |
| no_stem_residuals  | T       | T        | T          | T   | F              |
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.errors import ConfigError

FLAG_NAMES = ("use_detrans", "use_conv_ffm", "use_additional_encoder", "use_epe", "use_stem_residuals")

VARIANT_FLAGS: Dict[str, Tuple[bool, bool, bool, bool, bool]] = {
    "no_detrans": (False, False, False, False, True),
    "detrans": (True, False, False, False, True),
    "no_additional": (True, True, False, False, True),
    "no_epe": (True, True, True, False, True),
    "full": (True, True, True, True, True),
    "no_stem_residuals": (True, True, True, True, False),
}

# Cumulative ladder (parameter count strictly increases along it).
VARIANT_LADDER = ("no_detrans", "detrans", "no_additional", "no_epe", "full")

VARIANT_LABELS: Dict[str, str] = {
    "no_detrans": "ConvFormer w/o DeTrans",
    "detrans": "ConvFormer w DeTrans",
    "no_additional": "ConvFormer w/o Additional Enhanced DeTrans",
    "no_epe": "ConvFormer w/o EPE",
    "full": "ConvFormer",
    "no_stem_residuals": "ConvFormer w/o residual connections",
}


class ModelConfig(BaseModel):
    """
    Architecture hyperparameters.

    Attributes:
        in_channels (int): Input image channels.
        num_classes (int): Output classes (background included).
        stage_channels (Tuple[int, int, int, int]): Widths at 1/2, 1/4, 1/8, 1/16.
        stem_conv_blocks (int): Conv-BN-ReLU blocks after each downsampling conv.
        num_heads (int): Attention heads M.
        num_points (int): Sampling points K per level and head.
        encoder_layers (int): Depth of the additional encoder.
        stem_detrans_layers (int): Depth of the Enhanced DeTrans block inside each hybrid stem.
        ffm_expansion (int): Hidden width multiplier of the feed-forward module.
        encoder_channels (int): Common width of the additional encoder.
        use_level_embed (bool): Learned per-level embedding in the additional encoder.
        bn_momentum (float): Running-statistics momentum of every batch norm.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    in_channels: int = Field(default=1, ge=1)
    num_classes: int = Field(default=2, ge=2)
    stage_channels: Tuple[int, int, int, int] = (16, 32, 64, 128)
    stem_conv_blocks: int = Field(default=2, ge=0)
    num_heads: int = Field(default=4, ge=1)
    num_points: int = Field(default=4, ge=1)
    encoder_layers: int = Field(default=4, ge=0)
    stem_detrans_layers: int = Field(default=1, ge=1)
    ffm_expansion: int = Field(default=4, ge=1)
    encoder_channels: int = Field(default=32, ge=4)
    use_level_embed: bool = True
    bn_momentum: float = Field(default=0.1, gt=0.0, le=1.0)

    use_detrans: bool = True
    use_conv_ffm: bool = True
    use_additional_encoder: bool = True
    use_epe: bool = True
    use_stem_residuals: bool = True

    @field_validator("stage_channels")
    @classmethod
    def _check_stages(cls, value: Tuple[int, int, int, int]) -> Tuple[int, int, int, int]:
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError(f"stage_channels must be strictly increasing, got {value}")
        if any(c <= 0 or c % 4 for c in value):
            raise ValueError(f"stage_channels must be positive multiples of 4, got {value}")
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "ModelConfig":
        for c in self.stage_channels:
            if c % self.num_heads:
                raise ValueError(f"stage width {c} is not divisible by num_heads={self.num_heads}")
        if self.encoder_channels % 4 or self.encoder_channels % self.num_heads:
            raise ValueError(
                f"encoder_channels={self.encoder_channels} must be divisible by 4 and by num_heads={self.num_heads}"
            )
        if self.use_conv_ffm and not self.use_detrans:
            raise ValueError("use_conv_ffm requires use_detrans")
        if self.use_additional_encoder and not self.use_detrans:
            raise ValueError("use_additional_encoder requires use_detrans")
        if self.use_epe and not self.use_additional_encoder:
            raise ValueError("use_epe requires use_additional_encoder")
        return self

    @property
    def flags(self) -> Tuple[bool, bool, bool, bool, bool]:
        return tuple(getattr(self, name) for name in FLAG_NAMES)

    def variant_name(self) -> Optional[str]:
        """Name of the ladder variant these flags match, if any."""
        for name, flags in VARIANT_FLAGS.items():
            if flags == self.flags:
                return name
        return None


def build_variant(name: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    """
    ModelConfig for a named ablation variant.

    Args:
        name: One of `VARIANT_FLAGS`.
        base: Hyperparameters to keep (defaults when omitted); only the flags change.

    Raises:
        ConfigError: Unknown variant name.
    """
    if name not in VARIANT_FLAGS:
        raise ConfigError(f"unknown variant '{name}' (choose from {', '.join(VARIANT_FLAGS)})", key="variant")
    base = base or ModelConfig()
    values = base.model_dump()
    values.update(dict(zip(FLAG_NAMES, VARIANT_FLAGS[name])))
    return ModelConfig(**values)
