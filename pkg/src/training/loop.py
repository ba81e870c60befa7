"""
Training Loop.

Each iteration:
    sample batch -> augment -> forward -> Dice + CE loss -> backward -> AdamW with poly lr

Every iteration draws its batch from a generator seeded by (train seed, iteration), so a
run is reproducible and a failing batch can be regenerated from its seed alone.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, List, Optional, Tuple

import numpy as np

from src.analysis.metrics import MetricsReport, build_metrics_report
from src.errors import NumericError, TrainingAborted
from src.model.config import ModelConfig
from src.model.convformer import ConvFormer
from src.tensor.io import save_cft
from src.tensor.tensor import Tensor, no_grad
from src.training.data import SegmentationDataset, sample_batch
from src.training.ledger import RunLedger
from src.training.loss import dice_ce_loss
from src.training.optim import adamw_step, poly_lr
from src.training.schema import EvalRecord, LossRecord, TrainConfig
from src.utils.checkpoints import save_model

logger = logging.getLogger(__name__)

ProgressCallback = Callable[[int, float], None]


@dataclass
class TrainResult:
    """
    Outcome of a training run.

    Attributes:
        model (ConvFormer): Trained model (train mode left off).
        run_id (str): Identifier used in the ledger.
        losses (List[float]): Loss of every iteration, in order.
        lrs (List[float]): Learning rate of every iteration.
        evals (List[Tuple[int, MetricsReport]]): Periodic evaluations.
        checkpoint_path (Optional[str]): Final checkpoint, when written.
    """

    model: ConvFormer
    run_id: str
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    evals: List[Tuple[int, MetricsReport]] = field(default_factory=list)
    checkpoint_path: Optional[str] = None


def batch_seed(seed: int, iteration: int) -> int:
    """Seed of the batch drawn at `iteration`."""
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1, dtype=np.uint64)[0])


def predict(model: ConvFormer, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Argmax class maps [N, H, W] in eval mode without building a graph."""
    was_training = model.training
    model.eval()
    outputs = []
    try:
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                chunk = Tensor(images[start : start + batch_size])
                outputs.append(model(chunk).argmax())
    finally:
        model.train(was_training)
    return np.concatenate(outputs, axis=0).astype(np.int64)


def evaluate_model(
    model: ConvFormer,
    dataset: SegmentationDataset,
    spacing: float = 1.0,
    batch_size: int = 8,
) -> Tuple[MetricsReport, np.ndarray]:
    preds = predict(model, dataset.images, batch_size)
    return build_metrics_report(preds, dataset.masks, model.cfg.num_classes, spacing), preds


def _dump_batch(
    dump_root: str,
    run_id: str,
    iteration: int,
    seed: int,
    images: np.ndarray,
    masks: np.ndarray,
) -> Optional[str]:
    path = os.path.join(dump_root, f"nan_{run_id}_iter{iteration}")
    try:
        os.makedirs(path, exist_ok=True)
        save_cft(os.path.join(path, "images.cft"), images)
        save_cft(os.path.join(path, "masks.cft"), masks.astype(np.float32))
        with open(os.path.join(path, "info.txt"), "w", encoding="utf-8") as handle:
            handle.write(f"run_id={run_id}\niteration={iteration}\nbatch_seed={seed}\n")
    except OSError:
        logger.exception(f"Failed to dump offending batch to {path}")
        return None
    return path


def train_loop(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: SegmentationDataset,
    val_dataset: Optional[SegmentationDataset] = None,
    ledger: Optional[RunLedger] = None,
    run_id: Optional[str] = None,
    checkpoint_out: Optional[str] = None,
    loss_log: Optional[str] = None,
    dump_root: str = "dumps",
    spacing: float = 1.0,
    on_iteration: Optional[ProgressCallback] = None,
) -> TrainResult:
    """
    Train a ConvFormer from scratch.

    Args:
        model_cfg: Architecture and ablation flags.
        train_cfg: Recipe; `seed` drives initialization and batch sampling.
        dataset: Training pairs.
        val_dataset: Evaluated every `eval_every` iterations (training set when omitted).
        ledger: Receives loss and evaluation records.
        run_id: Ledger identifier (timestamp by default).
        checkpoint_out: Final checkpoint path.
        loss_log: Plain-text `iteration=... loss=... lr=...` log, one line per iteration.
        dump_root: Parent directory of the diagnostic dump written on a numeric abort.
        spacing: Pixel spacing for boundary metrics.
        on_iteration: Called with (iteration, loss) after each step.

    Returns:
        TrainResult: Model and loss / evaluation history.

    Raises:
        TrainingAborted: The loss (or any intermediate) went non-finite.
    """
    run_id = run_id or datetime.now().strftime("%Y%m%d_%H%M%S")
    model = ConvFormer(model_cfg, seed=train_cfg.seed)
    store = model.store
    variant = model_cfg.variant_name()
    eval_set = val_dataset if val_dataset is not None and len(val_dataset) else dataset
    result = TrainResult(model=model, run_id=run_id)
    logger.info(
        f"TRAIN: {run_id} | VARIANT: {variant or 'custom'} | PARAMS: {model.num_parameters()} | ITERS: {train_cfg.max_iters}"
    )

    log_handle = None
    if loss_log:
        os.makedirs(os.path.dirname(loss_log) or ".", exist_ok=True)
        log_handle = open(loss_log, "w", encoding="utf-8")
    try:
        model.train()
        for iteration in range(1, train_cfg.max_iters + 1):
            seed = batch_seed(train_cfg.seed, iteration)
            rng = np.random.default_rng(seed)
            images, masks = sample_batch(
                dataset, train_cfg.batch_size, rng, train_cfg.augment, train_cfg.crop_fraction
            )
            lr = poly_lr(iteration - 1, train_cfg)
            store.zero_grad()
            try:
                loss = dice_ce_loss(model(Tensor(images)), masks)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"loss is {value}")
                loss.backward()
            except NumericError as exc:
                dump = _dump_batch(dump_root, run_id, iteration, seed, images, masks)
                logger.error(f"ABORT: {run_id} | ITER: {iteration} | BATCH_SEED: {seed} | DUMP: {dump} | {exc}")
                raise TrainingAborted(
                    f"non-finite value at iteration {iteration} (batch seed {seed}): {exc}",
                    iteration=iteration,
                    batch_seed=seed,
                    dump_path=dump,
                ) from exc
            adamw_step(store, lr, train_cfg.weight_decay, train_cfg.betas, train_cfg.adam_eps)

            result.losses.append(value)
            result.lrs.append(lr)
            if log_handle is not None:
                log_handle.write(f"iteration={iteration} loss={value!r} lr={lr!r}\n")
            last = iteration == train_cfg.max_iters
            if iteration % train_cfg.log_every == 0 or last:
                logger.info(f"ITER: {iteration} | LOSS: {value:.4f} | LR: {lr:.2e}")
                if ledger is not None:
                    ledger.record_loss(LossRecord(run_id=run_id, variant=variant, iteration=iteration, loss=value, lr=lr))
            if train_cfg.eval_every and (iteration % train_cfg.eval_every == 0 or last):
                report, _ = evaluate_model(model, eval_set, spacing)
                result.evals.append((iteration, report))
                logger.info(f"EVAL: {iteration} | DICE: {report.mean['dice']:.4f} | IOU: {report.mean['iou']:.4f}")
                if ledger is not None:
                    ledger.record_eval(
                        EvalRecord(
                            run_id=run_id,
                            iteration=iteration,
                            split="val" if eval_set is not dataset else "train",
                            dice=report.mean["dice"],
                            iou=report.mean["iou"],
                            f1=report.mean["f1"],
                            hausdorff=report.mean["hausdorff"],
                            excluded=report.excluded,
                        )
                    )
            if on_iteration is not None:
                on_iteration(iteration, value)
    finally:
        if log_handle is not None:
            log_handle.close()
        model.eval()

    if checkpoint_out:
        result.checkpoint_path = save_model(model, checkpoint_out)
    return result
