"""
Run configuration: plain key=value files.

One key per line, `#` starts a comment, blank lines are ignored. Keys are flat; each
belongs to exactly one section:

- model: every `ModelConfig` field (`stage_channels` as a comma list, flags as true/false)
- train: every `TrainConfig` field, with the augmentation switches spelled
  `augment_flip` / `augment_crop`
- run:   paths and mode switches (`RunSettings`)

An empty value means None for optional keys. `num_classes` is required. When `variant`
is set its ablation flags replace the five `use_*` flags.
"""

from __future__ import annotations

import logging
import os
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.errors import ConfigError
from src.model.config import FLAG_NAMES, VARIANT_FLAGS, ModelConfig, build_variant
from src.training.schema import AugmentFlags, TrainConfig

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("num_classes",)
TUPLE_KEYS = ("stage_channels",)
AUGMENT_KEYS = {"augment_flip": "flip", "augment_crop": "crop"}
EFFECTIVE_CONFIG_NAME = "effective_config.cfg"


class RunSettings(BaseModel):
    """
    Paths and mode switches of a CLI run.

    Attributes:
        checkpoint_in (Optional[str]): Checkpoint to evaluate (eval) or resume from.
        checkpoint_out (str): Where training writes its final checkpoint.
        dataset_dir (Optional[str]): Stored dataset; generated and saved there when absent.
        report_dir (str): Output directory for logs, metrics and reports.
        ledger_path (str): SQLite run ledger.
        dump_masks (bool): Write predicted masks as PGM images.
        deterministic (bool): Single-threaded numerics.
        variant (Optional[str]): Ablation variant whose flags override the model flags.
        spacing (float): Pixel spacing for boundary distances.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    checkpoint_in: Optional[str] = None
    checkpoint_out: str = "out/model.ckpt"
    dataset_dir: Optional[str] = None
    report_dir: str = "out"
    ledger_path: str = "out/runs.db"
    dump_masks: bool = False
    deterministic: bool = False
    variant: Optional[str] = None
    spacing: float = Field(default=1.0, gt=0.0)


class RunConfig(BaseModel):
    """Effective configuration of one CLI invocation."""

    model_config = ConfigDict(frozen=True)

    model: ModelConfig
    train: TrainConfig = TrainConfig()
    run: RunSettings = RunSettings()


def _section_keys() -> Dict[str, str]:
    keys: Dict[str, str] = {}
    for name in ModelConfig.model_fields:
        keys[name] = "model"
    for name in TrainConfig.model_fields:
        if name != "augment":
            keys[name] = "train"
    for name in AUGMENT_KEYS:
        keys[name] = "train"
    for name in RunSettings.model_fields:
        keys[name] = "run"
    return keys


SECTION_OF = _section_keys()


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str) -> Any:
    if raw == "":
        return None
    if key in TUPLE_KEYS:
        return tuple(part.strip() for part in raw.split(","))
    return raw


def parse_pairs(lines: Iterable[str]) -> List[Tuple[int, str, str]]:
    """
    (line number, key, raw value) for every setting line.

    Raises:
        ConfigError: Malformed line or duplicate key.
    """
    pairs: List[Tuple[int, str, str]] = []
    seen: Dict[str, int] = {}
    for number, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"expected key=value, got '{text}'", line=number)
        key, value = (part.strip() for part in text.split("=", 1))
        if not key:
            raise ConfigError("empty key", line=number)
        if key in seen:
            raise ConfigError(f"duplicate key '{key}' (first set on line {seen[key]})", key=key, line=number)
        seen[key] = number
        pairs.append((number, key, value))
    return pairs


def _validation_error(exc: ValidationError, lines_of: Mapping[str, int], section: str) -> ConfigError:
    error = exc.errors()[0]
    loc = [str(part) for part in error.get("loc", ())]
    key = next((part for part in loc if part in lines_of), None)
    if key is None and loc and loc[0] == "augment" and len(loc) > 1:
        key = f"augment_{loc[1]}"
    message = error.get("msg", str(exc))
    return ConfigError(f"invalid {section} setting: {message}", key=key, line=lines_of.get(key) if key else None)


def build_section(cls: Type[BaseModel], values: Mapping[str, Any], lines_of: Mapping[str, int], section: str) -> BaseModel:
    try:
        return cls(**values)
    except ValidationError as exc:
        raise _validation_error(exc, lines_of, section) from None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """
    Parse a key=value run configuration.

    Raises:
        ConfigError: Malformed or duplicate lines, unknown keys, a missing required key,
            or a value failing validation. The message names the key and its line.
    """
    sections: Dict[str, Dict[str, Any]] = {"model": {}, "train": {}, "run": {}}
    lines_of: Dict[str, int] = {}
    augment: Dict[str, Any] = {}
    for number, key, raw in parse_pairs(text.splitlines()):
        if key not in SECTION_OF:
            raise ConfigError(f"unknown key '{key}'", key=key, line=number)
        lines_of[key] = number
        value = _coerce(key, raw)
        if value is None and key not in RunSettings.model_fields:
            raise ConfigError(f"key '{key}' needs a value", key=key, line=number)
        if key in AUGMENT_KEYS:
            augment[AUGMENT_KEYS[key]] = value
        else:
            sections[SECTION_OF[key]][key] = value
    for key in REQUIRED_KEYS:
        if key not in lines_of:
            raise ConfigError(f"missing required key '{key}'", key=key)

    run = build_section(RunSettings, sections["run"], lines_of, "run")
    if augment:
        sections["train"]["augment"] = build_section(AugmentFlags, augment, lines_of, "train")
    train = build_section(TrainConfig, sections["train"], lines_of, "train")
    model_values = sections["model"]
    if run.variant is not None:
        if run.variant not in VARIANT_FLAGS:
            raise ConfigError(f"unknown variant '{run.variant}'", key="variant", line=lines_of.get("variant"))
        model_values = {**model_values, **dict(zip(FLAG_NAMES, VARIANT_FLAGS[run.variant]))}
    model = build_section(ModelConfig, model_values, lines_of, "model")
    logger.debug(f"CONFIG: {source} | KEYS: {len(lines_of)}")
    return RunConfig(model=model, train=train, run=run)


def load_run_config(path: str) -> RunConfig:
    """
    Raises:
        ConfigError: Unreadable file or invalid contents.
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}") from None
    return parse_run_config(text, source=path)


def apply_overrides(
    cfg: RunConfig,
    variant: Optional[str] = None,
    seed: Optional[int] = None,
    deterministic: Optional[bool] = None,
) -> RunConfig:
    """Command-line overrides on top of a parsed config."""
    model, train, run = cfg.model, cfg.train, cfg.run
    if variant is not None:
        model = build_variant(variant, base=model)
        run = run.model_copy(update={"variant": variant})
    if seed is not None:
        train = TrainConfig(**{**train.model_dump(), "seed": seed})
    if deterministic:
        run = run.model_copy(update={"deterministic": True})
    return RunConfig(model=model, train=train, run=run)


def format_section(model: BaseModel) -> List[str]:
    """key=value lines for every field of a flat pydantic model, in declaration order."""
    return [f"{name}={format_value(getattr(model, name))}" for name in type(model).model_fields]


def format_run_config(cfg: RunConfig) -> str:
    """Effective config with every default spelled out; re-parses to an equal RunConfig."""
    train_lines = []
    for name in TrainConfig.model_fields:
        if name == "augment":
            train_lines.append(f"augment_flip={format_value(cfg.train.augment.flip)}")
            train_lines.append(f"augment_crop={format_value(cfg.train.augment.crop)}")
        else:
            train_lines.append(f"{name}={format_value(getattr(cfg.train, name))}")
    lines = ["# model", *format_section(cfg.model), "", "# train", *train_lines, "", "# run", *format_section(cfg.run)]
    return "\n".join(lines) + "\n"


def write_effective_config(cfg: RunConfig, directory: str) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, EFFECTIVE_CONFIG_NAME)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(format_run_config(cfg))
    return path
