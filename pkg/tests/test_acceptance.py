"""End-to-end training checks. Minutes of CPU time each; run with `pytest -m slow`."""

import numpy as np
import pytest

import main
from src.analysis.ablation import run_ablation
from src.model.config import ModelConfig, build_variant
from src.model.convformer import ConvFormer
from src.training.data import synth_dataset
from src.training.loop import evaluate_model, train_loop
from src.training.schema import AugmentFlags, TrainConfig
from src.utils.gradcheck_suite import run_suite
from src.utils.run_config import RunConfig

pytestmark = pytest.mark.slow


class TestAcceptance:
    """Desk-scale training and reproducibility checks"""

    def test_full_gradient_suite(self):
        failed = [r.name for r in run_suite("all") if not r.passed]
        assert failed == []

    def test_overfit_small_set(self):
        """Test that the full model memorizes eight 64x64 images"""
        cfg = build_variant("full")
        assert ConvFormer(cfg).num_parameters() <= 1_000_000
        train = TrainConfig(max_iters=2000, batch_size=4, image_size=64, train_samples=8, eval_every=0, augment=AugmentFlags(flip=False, crop=False))
        dataset = synth_dataset(8, 64, seed=0)
        result = train_loop(cfg, train, dataset)
        report, _ = evaluate_model(result.model, dataset)
        assert report.mean["dice"] >= 0.95
        windows = np.asarray(result.losses[:500]).reshape(5, 100).mean(axis=1)
        assert windows[-1] < windows[0]

    def test_full_beats_plain_cnn(self):
        """Test that DeTrans helps on average over three seeds"""
        train = TrainConfig(max_iters=300, image_size=64, train_samples=64, val_samples=16, num_seeds=3)
        result = run_ablation(RunConfig(model=ModelConfig(), train=train), variants=("no_detrans", "full"))
        dice = dict(zip(result.table["variant"], result.table["dice_mean"]))
        assert dice["full"] >= dice["no_detrans"]

    def test_deterministic_cli_runs(self, tmp_path, monkeypatch):
        """Test that two deterministic runs write identical checkpoints and metrics"""
        monkeypatch.setenv("CONVFORMER_LOG_DIR", str(tmp_path / "logs"))
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            path = tmp_path / f"{name}.cfg"
            path.write_text(
                "num_classes = 2\nmax_iters = 5\nimage_size = 32\ntrain_samples = 4\nval_samples = 2\n"
                f"report_dir = {out}\ncheckpoint_out = {out}/model.ckpt\nledger_path = {out}/runs.db\n"
            )
            assert main.main(["train", "--config", str(path), "--deterministic", "--seed", "11"]) == main.EXIT_OK
            outputs.append(out)
        a, b = outputs
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
        assert (a / "metrics.txt").read_text() == (b / "metrics.txt").read_text()
