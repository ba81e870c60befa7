"""
Optimization: poly learning-rate schedule and AdamW.
"""

from __future__ import annotations

import logging
from typing import Tuple

import numpy as np

from src.errors import RangeError, StateError
from src.tensor.parameters import ParameterStore
from src.training.schema import TrainConfig

logger = logging.getLogger(__name__)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """
    lr0 * (1 - iteration / max_iters) ** poly_power.

    Raises:
        RangeError: iteration outside [0, max_iters].
    """
    if iteration < 0 or iteration > cfg.max_iters:
        raise RangeError(f"iteration {iteration} outside [0, {cfg.max_iters}]")
    if cfg.max_iters == 0:
        return cfg.lr0
    return float(cfg.lr0 * (1.0 - iteration / cfg.max_iters) ** cfg.poly_power)


def adamw_step(
    store: ParameterStore,
    lr: float,
    weight_decay: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """
    One AdamW update of every parameter in `store`.

    Weight decay is decoupled: p <- p - lr * wd * p, then the bias-corrected Adam step
    p <- p - lr * m_hat / (sqrt(v_hat) + eps). Moments live in the store entries.

    Raises:
        StateError: A parameter has no gradient.
    """
    missing = [name for name, entry in store.items() if entry.grad is None]
    if missing:
        raise StateError(f"adamw_step: no gradient for {len(missing)} parameter(s), e.g. '{missing[0]}'")
    beta1, beta2 = betas
    store.step_count += 1
    step = store.step_count
    correction1 = 1.0 - beta1**step
    correction2 = 1.0 - beta2**step
    for _, entry in store.items():
        param = entry.tensor
        grad = entry.grad.astype(np.float64)
        value = param.data.astype(np.float64)
        value = value - lr * weight_decay * value
        entry.exp_avg[...] = beta1 * entry.exp_avg + (1.0 - beta1) * grad
        entry.exp_avg_sq[...] = beta2 * entry.exp_avg_sq + (1.0 - beta2) * grad * grad
        m_hat = entry.exp_avg / correction1
        v_hat = entry.exp_avg_sq / correction2
        value = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        param.data = value.astype(param.dtype)
