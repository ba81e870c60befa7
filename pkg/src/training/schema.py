"""
Training Schema Definitions.

- `TrainConfig` / `AugmentFlags`: validated recipe hyperparameters (pydantic).
- `LossRecord` / `EvalRecord`: SQLModel tables persisted by the run ledger.
"""

from datetime import datetime, timezone
from typing import Optional

from pydantic import BaseModel, ConfigDict, field_validator
from pydantic import Field as PydanticField
from sqlmodel import Field, SQLModel

DEFAULT_LR0 = 2e-4
DEFAULT_WEIGHT_DECAY = 0.005


class AugmentFlags(BaseModel):
    """
    Geometric augmentations applied identically to image and mask.

    Attributes:
        flip (bool): Random horizontal and vertical flips.
        crop (bool): Random crop, zero-padded back to the network size.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    flip: bool = True
    crop: bool = True


class TrainConfig(BaseModel):
    """
    Optimization recipe.

    Attributes:
        lr0 (float): Initial learning rate of the poly schedule.
        weight_decay (float): Decoupled AdamW weight decay.
        max_iters (int): Optimizer steps; 0 leaves the initialization untouched.
        poly_power (float): Exponent of the poly schedule, in (0, 1].
        batch_size (int): Images per step.
        seed (int): Seeds initialization, data and batch sampling.
        augment (AugmentFlags): Augmentation switches.
        log_every (int): Ledger interval in iterations (the last iteration is always logged).
        eval_every (int): Evaluation interval in iterations (0 disables periodic evaluation).
        train_samples (int): Synthetic training images.
        val_samples (int): Synthetic validation images.
        image_size (int): Side of the square synthetic images, divisible by 16.
        crop_fraction (float): Side of the random crop relative to the image.
        num_seeds (int): Seeds per variant in an ablation sweep.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    lr0: float = PydanticField(default=DEFAULT_LR0, gt=0.0)
    weight_decay: float = PydanticField(default=DEFAULT_WEIGHT_DECAY, ge=0.0)
    max_iters: int = PydanticField(default=2000, ge=0)
    poly_power: float = PydanticField(default=0.9, gt=0.0, le=1.0)
    batch_size: int = PydanticField(default=4, ge=1)
    seed: int = PydanticField(default=0, ge=0)
    augment: AugmentFlags = AugmentFlags()
    log_every: int = PydanticField(default=10, ge=1)
    eval_every: int = PydanticField(default=100, ge=0)
    train_samples: int = PydanticField(default=8, ge=1)
    val_samples: int = PydanticField(default=8, ge=0)
    image_size: int = PydanticField(default=64, ge=16)
    crop_fraction: float = PydanticField(default=0.875, gt=0.0, le=1.0)
    beta1: float = PydanticField(default=0.9, ge=0.0, lt=1.0)
    beta2: float = PydanticField(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = PydanticField(default=1e-8, gt=0.0)
    num_seeds: int = PydanticField(default=1, ge=1)

    @field_validator("image_size")
    @classmethod
    def _check_image_size(cls, value: int) -> int:
        if value % 16:
            raise ValueError(f"image_size must be divisible by 16, got {value}")
        return value

    @property
    def betas(self):
        return (self.beta1, self.beta2)


class LossRecord(SQLModel, table=True):
    """
    One logged training iteration.

    Attributes:
        id (Optional[int]): Primary Key.
        run_id (str): Training run identifier.
        variant (Optional[str]): Ablation variant name, if the config matches one.
        iteration (int): 1-based optimizer step.
        loss (float): Dice + CE loss of the step's batch.
        lr (float): Learning rate applied at the step.
        timestamp (datetime): UTC time of the record.
    """

    __table_args__ = {"extend_existing": True}

    id: Optional[int] = Field(default=None, primary_key=True, description="Unique record ID")
    run_id: str = Field(index=True, description="Training run identifier")
    variant: Optional[str] = Field(default=None, description="Ablation variant name")
    iteration: int = Field(index=True, description="Optimizer step (1-based)")
    loss: float = Field(description="Batch loss")
    lr: float = Field(description="Learning rate used for the step")
    timestamp: datetime = Field(
        default_factory=lambda: datetime.now(timezone.utc),
        description="Time of record (UTC)",
    )


class EvalRecord(SQLModel, table=True):
    """
    Periodic evaluation summary.
    """

    __table_args__ = {"extend_existing": True}

    id: Optional[int] = Field(default=None, primary_key=True, description="Unique record ID")
    run_id: str = Field(index=True, description="Training run identifier")
    iteration: int = Field(index=True, description="Optimizer step at evaluation")
    split: str = Field(default="val", description="Dataset split evaluated")
    dice: float = Field(description="Mean Dice over images and foreground classes")
    iou: float = Field(description="Mean IoU")
    f1: float = Field(description="Mean F1")
    hausdorff: Optional[float] = Field(default=None, description="Mean Hausdorff distance (None if all excluded)")
    excluded: int = Field(default=0, description="Images excluded from boundary metrics")
    timestamp: datetime = Field(
        default_factory=lambda: datetime.now(timezone.utc),
        description="Time of record (UTC)",
    )
