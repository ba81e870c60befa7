"""
Training Analysis and Visualization.

Produces:
1. Loss curve (iteration vs loss, with a rolling mean).
2. Ablation comparison (one bar per variant, error bars over seeds).
"""

from __future__ import annotations

import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=200, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_frame(losses: Sequence[float], window: int = 10) -> pd.DataFrame:
    """Long-form frame with the raw loss and its rolling mean per iteration."""
    df = pd.DataFrame({"iteration": range(1, len(losses) + 1), "loss": list(losses)})
    df["rolling"] = df["loss"].rolling(window=max(1, window), min_periods=1).mean()
    return df.melt(id_vars="iteration", value_vars=["loss", "rolling"], var_name="series", value_name="value")


def plot_loss_curve(losses: Sequence[float], path: str, window: int = 10, title: str = "Training Loss") -> Optional[str]:
    if not len(losses):
        return None
    fig, ax = plt.subplots(figsize=(10, 4))
    sns.lineplot(data=loss_frame(losses, window), x="iteration", y="value", hue="series", ax=ax)
    ax.set_title(title)
    ax.set_xlabel("Iteration")
    ax.set_ylabel("Dice + CE loss")
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_ablation(table: pd.DataFrame, path: str, metric: str = "f1") -> Optional[str]:
    """
    Bar chart of `<metric>_mean` per variant with `<metric>_std` error bars.

    Args:
        table: One row per variant with `label`, `<metric>_mean` and `<metric>_std` columns.
    """
    mean_col, std_col = f"{metric}_mean", f"{metric}_std"
    if table.empty or mean_col not in table:
        return None
    fig, ax = plt.subplots(figsize=(10, 4))
    sns.barplot(data=table, x="label", y=mean_col, hue="label", palette="viridis", legend=False, ax=ax)
    if std_col in table:
        ax.errorbar(range(len(table)), table[mean_col], yerr=table[std_col].fillna(0.0), fmt="none", ecolor="black", capsize=4)
    ax.set_title(f"Ablation: {metric}")
    ax.set_xlabel("Variant")
    ax.set_ylabel(metric)
    ax.tick_params(axis="x", rotation=30)
    ax.grid(True, axis="y", alpha=0.3)
    return _save(fig, path)
