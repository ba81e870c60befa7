import os

import numpy as np
import pytest

import main
from src.model.config import VARIANT_LABELS
from src.tensor.gradcheck import GradCheckReport, InputCheck
from src.training.data import SegmentationDataset, save_dataset
from src.utils.gradcheck_suite import CaseResult

TINY_CONFIG = """
num_classes = 2
stage_channels = 8, 16, 24, 32
stem_conv_blocks = 1
num_heads = 2
num_points = 2
encoder_layers = 1
ffm_expansion = 2
encoder_channels = 8
max_iters = 1
batch_size = 2
image_size = 32
train_samples = 2
val_samples = 2
eval_every = 0
"""


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("CONVFORMER_LOG_DIR", str(tmp_path / "logs"))


def _write_config(tmp_path, extra=""):
    out = tmp_path / "out"
    text = TINY_CONFIG + f"report_dir = {out}\ncheckpoint_out = {out}/model.ckpt\nledger_path = {out}/runs.db\n" + extra
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path), out


class TestCli:
    """Integration tests for the command-line entry point"""

    def test_gradcheck_single_scope(self):
        assert main.main(["gradcheck", "--scope", "relu", "--seeds", "1"]) == main.EXIT_OK

    def test_gradcheck_unknown_scope(self):
        assert main.main(["gradcheck", "--scope", "bogus"]) == main.EXIT_USAGE

    def test_gradcheck_failure_exit_code(self, monkeypatch):
        """Test that a failed case maps to exit code 1"""
        check = InputCheck(index=0, name="x", rel_error=0.5, checked_coords=12)
        failing = CaseResult(name="relu", reports=[GradCheckReport(name="relu[0]", tol=1e-4, h=1e-5, inputs=[check])])
        monkeypatch.setattr(main, "run_suite", lambda scope, seeds=None: [failing])
        assert main.main(["gradcheck", "--scope", "relu"]) == main.EXIT_CHECK_FAILED

    def test_missing_required_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("max_iters = 1\n")
        assert main.main(["train", "--config", str(path)]) == main.EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main.main(["train", "--config", str(tmp_path / "missing.cfg")]) == main.EXIT_USAGE

    def test_unknown_variant_is_usage_error(self, tmp_path):
        path, _ = _write_config(tmp_path)
        with pytest.raises(SystemExit) as exc:
            main.main(["train", "--config", path, "--variant", "bogus"])
        assert exc.value.code == 2

    def test_train_then_eval(self, tmp_path):
        path, out = _write_config(tmp_path, "dump_masks = true\n")
        assert main.main(["train", "--config", path, "--variant", "no_epe"]) == main.EXIT_OK
        assert (out / "model.ckpt").exists()
        assert (out / "metrics.txt").exists()
        assert (out / "loss.log").exists()
        assert (out / "effective_config.cfg").exists()
        assert (out / "masks" / "pred_000.pgm").exists()
        assert os.path.exists(out / "reports" / "index.json")

        assert main.main(["eval", "--config", path, "--variant", "no_epe"]) == main.EXIT_OK
        # the stored checkpoint was trained with no_epe flags
        assert main.main(["eval", "--config", path]) == main.EXIT_USAGE

    def test_eval_missing_checkpoint(self, tmp_path):
        path, _ = _write_config(tmp_path)
        assert main.main(["eval", "--config", path]) == main.EXIT_USAGE

    def test_eval_missing_dataset(self, tmp_path):
        path, out = _write_config(tmp_path)
        assert main.main(["train", "--config", path]) == main.EXIT_OK
        assert main.main(["eval", "--config", path, "--dataset", str(tmp_path / "nowhere")]) == main.EXIT_USAGE

    def test_nan_loss_exits_with_numeric_code(self, tmp_path):
        """Test that a non-finite training batch maps to exit code 3 and leaves a dump"""
        data_dir = tmp_path / "data"
        images = np.full((2, 1, 32, 32), np.nan, dtype=np.float32)
        save_dataset(str(data_dir), SegmentationDataset(images, np.zeros((2, 32, 32), dtype=np.int64)))
        path, out = _write_config(tmp_path, f"dataset_dir = {data_dir}\naugment_flip = false\naugment_crop = false\n")
        assert main.main(["train", "--config", path]) == main.EXIT_NUMERIC
        assert any(name.startswith("nan_") for name in os.listdir(out / "dumps"))

    def test_ablate_writes_table(self, tmp_path):
        path, out = _write_config(tmp_path)
        assert main.main(["ablate", "--config", path]) == main.EXIT_OK
        assert (out / "ablation" / "ablation.csv").exists()
        text = (out / "ablation" / "ablation.md").read_text(encoding="utf-8")
        for label in VARIANT_LABELS.values():
            assert label in text
        assert (out / "effective_config.cfg").exists()
