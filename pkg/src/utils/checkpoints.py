"""
Checkpoint utilities for saving and restoring model state.

Layout of a checkpoint file:

    CONVFORMER-CKPT v1
    <model config as key=value lines>
    <blank line>
    <name>\\n<CFT block>      (parameters in store order, then batch-norm buffers)
    ...
"""

from __future__ import annotations

import io
import logging
import os
from collections import OrderedDict
from typing import Dict, Optional, Tuple

import numpy as np

from src.errors import ConfigError, DataError
from src.model.config import ModelConfig
from src.model.convformer import ConvFormer
from src.tensor.io import read_tensor, write_tensor
from src.utils.run_config import build_section, format_section, parse_pairs, TUPLE_KEYS

logger = logging.getLogger(__name__)

HEADER = "CONVFORMER-CKPT v1"


def build_checkpoint(model: ConvFormer) -> bytes:
    """Serialize the config and every parameter / buffer of `model`."""
    buffer = io.BytesIO()
    buffer.write((HEADER + "\n").encode("ascii"))
    for line in format_section(model.cfg):
        buffer.write((line + "\n").encode("ascii"))
    buffer.write(b"\n")
    for name, array in model.store.state_arrays().items():
        buffer.write((name + "\n").encode("ascii"))
        write_tensor(buffer, array)
    return buffer.getvalue()


def write_checkpoint(payload: bytes, path: str) -> str:
    """
    Write a checkpoint payload to disk and return the path.
    """
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(payload)
    logger.info(f"CHECKPOINT: {path}")
    return path


def save_model(model: ConvFormer, path: str) -> str:
    return write_checkpoint(build_checkpoint(model), path)


def read_checkpoint(path: str) -> Tuple[ModelConfig, "OrderedDict[str, np.ndarray]"]:
    """
    Parse a checkpoint file.

    Raises:
        DataError: Bad header or truncated tensor data.
        ConfigError: Invalid config section.
    """
    with open(path, "rb") as handle:
        header = handle.readline().decode("ascii", errors="replace").rstrip("\n")
        if header != HEADER:
            raise DataError(f"{path}: not a ConvFormer checkpoint (header {header!r})")
        config_lines = []
        while True:
            line = handle.readline()
            if not line:
                raise DataError(f"{path}: truncated config section")
            text = line.decode("ascii").rstrip("\n")
            if not text:
                break
            config_lines.append(text)
        values: Dict[str, object] = {}
        lines_of: Dict[str, int] = {}
        for number, key, raw in parse_pairs(config_lines):
            if key not in ModelConfig.model_fields:
                raise ConfigError(f"unknown model key '{key}' in checkpoint", key=key, line=number + 1)
            values[key] = tuple(raw.split(",")) if key in TUPLE_KEYS else raw
            lines_of[key] = number + 1
        cfg = build_section(ModelConfig, values, lines_of, "model")
        arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        while True:
            name = handle.readline()
            if not name:
                break
            arrays[name.decode("ascii").rstrip("\n")] = read_tensor(handle)
    return cfg, arrays


def load_model(path: str, expected: Optional[ModelConfig] = None) -> ConvFormer:
    """
    Rebuild the model stored in a checkpoint.

    Args:
        path: Checkpoint file.
        expected: When given, the stored config must equal it.

    Raises:
        ConfigError: Stored config differs from `expected`, or tensors do not fit the model.
    """
    cfg, arrays = read_checkpoint(path)
    if expected is not None and cfg != expected:
        differing = [k for k in ModelConfig.model_fields if getattr(cfg, k) != getattr(expected, k)]
        raise ConfigError(f"checkpoint config differs from the run config in: {', '.join(differing)}", key=differing[0])
    model = ConvFormer(cfg)
    model.store.load_arrays(arrays)
    logger.info(f"CHECKPOINT LOADED: {path} | PARAMS: {model.num_parameters()}")
    return model
