"""
Component ablation.

Trains every named variant on identical data and seeds and tabulates overlap scores,
parameter counts and a paired t-test of per-image F1 against the full model. Variants run
sequentially so the sweep is reproducible.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import ttest_rel

from src.analysis.chart import plot_ablation
from src.analysis.report import markdown_table
from src.model.config import VARIANT_FLAGS, VARIANT_LABELS, build_variant
from src.training.data import synth_dataset
from src.training.ledger import RunLedger
from src.training.loop import evaluate_model, train_loop
from src.training.schema import TrainConfig
from src.utils.run_config import RunConfig

logger = logging.getLogger(__name__)

TABLE_METRICS = ("iou", "precision", "recall", "f1", "dice")
REFERENCE_VARIANT = "full"
VAL_SEED_OFFSET = 10_000


@dataclass
class AblationResult:
    """
    Attributes:
        table (pd.DataFrame): One row per variant.
        scores (Dict[str, List[float]]): Per-image validation F1 of each variant, seeds concatenated.
        paths (Dict[str, str]): Written artifacts.
    """

    table: pd.DataFrame
    scores: Dict[str, List[float]] = field(default_factory=dict)
    paths: Dict[str, str] = field(default_factory=dict)


def _p_value(reference: Sequence[float], scores: Sequence[float]) -> float:
    a, b = np.asarray(reference, dtype=np.float64), np.asarray(scores, dtype=np.float64)
    if a.size < 2 or a.shape != b.shape or np.allclose(a - b, (a - b)[0]):
        return float("nan")
    return float(ttest_rel(a, b).pvalue)


def run_ablation(
    cfg: RunConfig,
    output_dir: Optional[str] = None,
    variants: Sequence[str] = tuple(VARIANT_FLAGS),
    ledger: Optional[RunLedger] = None,
    on_variant: Optional[Callable[[str, int], None]] = None,
) -> AblationResult:
    """
    Train and evaluate every variant for `cfg.train.num_seeds` seeds.

    Seed s uses train seed `cfg.train.seed + s` for initialization, batches and training
    data; the validation set is drawn from a disjoint seed.
    """
    train_base = cfg.train
    per_seed: Dict[str, List[Dict[str, float]]] = {name: [] for name in variants}
    scores: Dict[str, List[float]] = {name: [] for name in variants}
    params: Dict[str, int] = {}

    for offset in range(train_base.num_seeds):
        seed = train_base.seed + offset
        train_set = synth_dataset(train_base.train_samples, train_base.image_size, seed, cfg.model.num_classes)
        val_set = (
            synth_dataset(train_base.val_samples, train_base.image_size, seed + VAL_SEED_OFFSET, cfg.model.num_classes)
            if train_base.val_samples
            else train_set
        )
        train_cfg = TrainConfig(**{**train_base.model_dump(), "seed": seed, "eval_every": 0})
        for name in variants:
            if on_variant is not None:
                on_variant(name, seed)
            model_cfg = build_variant(name, base=cfg.model)
            result = train_loop(
                model_cfg,
                train_cfg,
                train_set,
                ledger=ledger,
                run_id=f"ablate_{name}_seed{seed}",
                spacing=cfg.run.spacing,
            )
            report, _ = evaluate_model(result.model, val_set, cfg.run.spacing)
            params[name] = result.model.num_parameters()
            per_seed[name].append({m: report.mean[m] for m in TABLE_METRICS})
            scores[name].extend(report.image_scores("f1"))
            logger.info(f"ABLATE: {name} | SEED: {seed} | F1: {report.mean['f1']:.4f} | PARAMS: {params[name]}")

    rows = []
    for name in variants:
        runs = pd.DataFrame(per_seed[name])
        row = {"variant": name, "label": VARIANT_LABELS[name], "params": params[name]}
        for metric in TABLE_METRICS:
            row[f"{metric}_mean"] = float(runs[metric].mean())
            row[f"{metric}_std"] = float(runs[metric].std(ddof=0))
        row["p_value"] = (
            _p_value(scores[REFERENCE_VARIANT], scores[name])
            if REFERENCE_VARIANT in scores and name != REFERENCE_VARIANT
            else float("nan")
        )
        rows.append(row)
    table = pd.DataFrame(rows)
    result = AblationResult(table=table, scores=scores)
    if output_dir:
        result.paths = write_ablation(table, output_dir)
    return result


def ablation_markdown(table: pd.DataFrame) -> str:
    """Variant x metric table with `mean ± std` cells."""
    display = pd.DataFrame({"Variant": table["label"], "Para.": table["params"]})
    for metric in TABLE_METRICS:
        display[metric] = [
            f"{m:.4f} ± {s:.4f}" for m, s in zip(table[f"{metric}_mean"], table[f"{metric}_std"])
        ]
    display["p (F1 vs full)"] = ["-" if np.isnan(p) else f"{p:.3g}" for p in table["p_value"]]
    return markdown_table(display, list(display.columns))


def write_ablation(table: pd.DataFrame, output_dir: str) -> Dict[str, str]:
    os.makedirs(output_dir, exist_ok=True)
    paths = {"csv": os.path.join(output_dir, "ablation.csv"), "markdown": os.path.join(output_dir, "ablation.md")}
    table.to_csv(paths["csv"], index=False, float_format="%.6f")
    with open(paths["markdown"], "w", encoding="utf-8") as handle:
        handle.write("# Ablation\n\n" + ablation_markdown(table) + "\n")
    plot = plot_ablation(table, os.path.join(output_dir, "ablation.png"), metric="f1")
    if plot:
        paths["plot"] = plot
    return paths
