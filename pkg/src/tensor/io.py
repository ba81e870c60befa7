"""
Tensor and mask file formats.

CFT container (one tensor):
    b"CFT1" | u8 rank | rank x u32 little-endian dims | float32 little-endian payload

Masks are dumped as 8-bit binary portable graymaps (P5) for quick inspection.
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Union

import numpy as np

from src.errors import DataError, DimensionError
from src.tensor.tensor import Tensor

MAGIC = b"CFT1"


def encode_tensor(value: Union[Tensor, np.ndarray]) -> bytes:
    """Serialize an array to a CFT block."""
    array = value.data if isinstance(value, Tensor) else np.asarray(value)
    if array.ndim > 255:
        raise DimensionError(f"CFT supports rank <= 255, got {array.ndim}")
    header = MAGIC + struct.pack("<B", array.ndim) + np.asarray(array.shape, dtype="<u4").tobytes()
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def write_tensor(handle: BinaryIO, value: Union[Tensor, np.ndarray]) -> None:
    handle.write(encode_tensor(value))


def _read_exact(handle: BinaryIO, size: int) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise DataError(f"truncated CFT block: wanted {size} bytes, got {len(data)}")
    return data


def read_tensor(handle: BinaryIO) -> np.ndarray:
    """Read one CFT block from an open binary stream."""
    magic = _read_exact(handle, 4)
    if magic != MAGIC:
        raise DataError(f"bad CFT magic {magic!r}")
    (rank,) = struct.unpack("<B", _read_exact(handle, 1))
    dims = tuple(int(d) for d in np.frombuffer(_read_exact(handle, 4 * rank), dtype="<u4"))
    count = int(np.prod(dims)) if dims else 1
    payload = np.frombuffer(_read_exact(handle, 4 * count), dtype="<f4")
    return payload.astype(np.float32).reshape(dims)


def save_cft(path: str, value: Union[Tensor, np.ndarray]) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as handle:
        write_tensor(handle, value)
    return path


def load_cft(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        array = read_tensor(handle)
        if handle.read(1):
            raise DataError(f"{path}: trailing bytes after CFT block")
    return array


def write_pgm(path: str, mask: np.ndarray, num_classes: int = 2) -> str:
    """Write a class-index mask as an 8-bit P5 graymap, classes spread over 0..255."""
    if mask.ndim != 2:
        raise DimensionError(f"PGM masks must be 2D, got {mask.shape}")
    levels = max(num_classes - 1, 1)
    pixels = (np.clip(mask, 0, levels).astype(np.int64) * 255 // levels).astype(np.uint8)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii"))
        handle.write(pixels.tobytes())
    return path


def read_pgm(path: str) -> np.ndarray:
    """Read an 8-bit P5 graymap written by `write_pgm`."""
    with open(path, "rb") as handle:
        data = handle.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path}: not a P5 graymap")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)
