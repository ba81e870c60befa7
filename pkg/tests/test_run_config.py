import pytest

from src.errors import ConfigError
from src.model.config import VARIANT_FLAGS
from src.utils.run_config import (
    apply_overrides,
    format_run_config,
    load_run_config,
    parse_run_config,
    write_effective_config,
)

BASIC = """
# tiny desk run
num_classes = 2
stage_channels = 8, 16, 24, 32
num_heads = 2
encoder_channels = 8
max_iters = 3
augment_crop = false
report_dir = out/tiny
"""


class TestRunConfig:
    """Unit tests for the key=value run configuration"""

    def test_parse_sections(self):
        cfg = parse_run_config(BASIC)
        assert cfg.model.stage_channels == (8, 16, 24, 32)
        assert cfg.model.num_heads == 2
        assert cfg.train.max_iters == 3
        assert cfg.train.augment.crop is False
        assert cfg.train.augment.flip is True
        assert cfg.run.report_dir == "out/tiny"
        assert cfg.run.checkpoint_in is None

    def test_effective_config_reparses(self):
        """Test that the spelled-out config parses back to the same values"""
        cfg = parse_run_config(BASIC)
        assert parse_run_config(format_run_config(cfg)) == cfg

    def test_missing_required_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_run_config("max_iters = 3\n")
        assert exc.value.key == "num_classes"

    def test_unknown_key_reports_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_run_config("num_classes = 2\n\nbogus = 1\n")
        assert exc.value.key == "bogus"
        assert exc.value.line == 3

    def test_invalid_value_reports_line(self):
        with pytest.raises(ConfigError) as exc:
            parse_run_config("num_classes = 2\nimage_size = 40\n")
        assert exc.value.key == "image_size"
        assert exc.value.line == 2

    def test_duplicate_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_run_config("num_classes = 2\nnum_classes = 3\n")
        assert exc.value.line == 2

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_run_config("num_classes 2\n")

    def test_variant_replaces_flags(self):
        cfg = parse_run_config("num_classes = 2\nvariant = no_epe\n")
        assert cfg.model.flags == VARIANT_FLAGS["no_epe"]

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            parse_run_config("num_classes = 2\nvariant = tiny\n")

    def test_overrides(self):
        cfg = apply_overrides(parse_run_config(BASIC), variant="detrans", seed=7, deterministic=True)
        assert cfg.model.flags == VARIANT_FLAGS["detrans"]
        assert cfg.run.variant == "detrans"
        assert cfg.train.seed == 7
        assert cfg.run.deterministic is True
        assert cfg.model.stage_channels == (8, 16, 24, 32)

    def test_write_and_load(self, tmp_path):
        cfg = parse_run_config(BASIC)
        path = write_effective_config(cfg, str(tmp_path))
        assert load_run_config(path) == cfg

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "missing.cfg"))
