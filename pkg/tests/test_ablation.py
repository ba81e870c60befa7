import math
import os

import pytest

from src.analysis.ablation import ablation_markdown, run_ablation
from src.model.config import ModelConfig, VARIANT_LABELS
from src.training.schema import TrainConfig
from src.utils.run_config import RunConfig

TINY = ModelConfig(
    stage_channels=(8, 16, 24, 32),
    stem_conv_blocks=1,
    num_heads=2,
    num_points=2,
    encoder_layers=1,
    ffm_expansion=2,
    encoder_channels=8,
)


@pytest.fixture
def cfg():
    train = TrainConfig(max_iters=1, batch_size=2, image_size=32, train_samples=2, val_samples=2, num_seeds=2)
    return RunConfig(model=TINY, train=train)


class TestAblation:
    """Unit tests for the component ablation sweep"""

    def test_table_and_artifacts(self, cfg, tmp_path):
        seen = []
        result = run_ablation(
            cfg,
            output_dir=str(tmp_path),
            variants=("no_detrans", "full"),
            on_variant=lambda name, seed: seen.append((name, seed)),
        )
        assert seen == [("no_detrans", 0), ("full", 0), ("no_detrans", 1), ("full", 1)]
        table = result.table
        assert list(table["variant"]) == ["no_detrans", "full"]
        assert list(table["label"]) == [VARIANT_LABELS["no_detrans"], VARIANT_LABELS["full"]]
        assert table["params"].iloc[0] < table["params"].iloc[1]
        assert math.isnan(table["p_value"].iloc[1])
        for metric in ("iou", "precision", "recall", "f1", "dice"):
            assert 0.0 <= table[f"{metric}_mean"].iloc[0] <= 1.0
            assert table[f"{metric}_std"].iloc[0] >= 0.0
        assert len(result.scores["full"]) == 4
        for key in ("csv", "markdown", "plot"):
            assert os.path.exists(result.paths[key])

    def test_markdown_cells(self, cfg):
        result = run_ablation(cfg.model_copy(update={"train": cfg.train.model_copy(update={"num_seeds": 1, "max_iters": 0})}), variants=("detrans",))
        text = ablation_markdown(result.table)
        assert "±" in text
        assert VARIANT_LABELS["detrans"] in text
        assert result.paths == {}
