"""
Parameter Store.

The store owns every trainable tensor of a model, keyed by a dot-separated path that
mirrors module nesting (e.g. `encoder.layers.0.attn.value_proj.weight`). Insertion order
is fixed at construction, so iteration is deterministic and checkpoints are written in a
stable order.

Each entry also carries the AdamW moment estimates (float64). Batch-norm running statistics
live next to the parameters as named buffers; they are persisted but never trained.
"""

from __future__ import annotations

import contextlib
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.errors import ConfigError, DimensionError
from src.tensor.functional import RunningStats
from src.tensor.tensor import Tensor

logger = logging.getLogger(__name__)

ArrayLike = Union[Tensor, np.ndarray]


@dataclass
class ParameterEntry:
    """A trainable tensor plus its optimizer moments."""

    tensor: Tensor
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad


class ParameterStore:
    """
    Named, ordered collection of trainable tensors and running-statistics buffers.

    Attributes:
        rng (np.random.Generator): Initialization generator, seeded once at construction.
        step_count (int): Number of optimizer steps applied so far.
    """

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self._entries: "OrderedDict[str, ParameterEntry]" = OrderedDict()
        self._buffers: "OrderedDict[str, RunningStats]" = OrderedDict()
        self._overrides: Dict[str, Tensor] = {}

    # --- Registration ---

    def _check_new(self, name: str) -> None:
        if not name or any(not part for part in name.split(".")):
            raise ConfigError(f"invalid parameter name '{name}'", key=name)
        if name in self._entries or name in self._buffers:
            raise ConfigError(f"duplicate parameter name '{name}'", key=name)

    def add(self, name: str, data: np.ndarray) -> Tensor:
        """Register `data` under `name` and return the trainable tensor."""
        self._check_new(name)
        array = np.asarray(data)
        dtype = np.float64 if array.dtype == np.float64 else np.float32
        tensor = Tensor(np.array(array, dtype=dtype), requires_grad=True)
        self._entries[name] = ParameterEntry(
            tensor=tensor,
            exp_avg=np.zeros(tensor.shape, dtype=np.float64),
            exp_avg_sq=np.zeros(tensor.shape, dtype=np.float64),
        )
        return tensor

    def glorot(self, name: str, shape: Sequence[int], fan_in: int, fan_out: int) -> Tensor:
        """Uniform(+-sqrt(6 / (fan_in + fan_out))) initialization."""
        bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
        return self.add(name, self.rng.uniform(-bound, bound, size=tuple(shape)).astype(np.float32))

    def zeros(self, name: str, shape: Sequence[int]) -> Tensor:
        return self.add(name, np.zeros(tuple(shape), dtype=np.float32))

    def ones(self, name: str, shape: Sequence[int]) -> Tensor:
        return self.add(name, np.ones(tuple(shape), dtype=np.float32))

    def add_buffer(self, name: str, stats: RunningStats) -> RunningStats:
        self._check_new(name)
        self._buffers[name] = stats
        return stats

    # --- Access ---

    def value(self, name: str) -> Tensor:
        """The tensor a layer should use right now (an active override wins)."""
        if name in self._overrides:
            return self._overrides[name]
        try:
            return self._entries[name].tensor
        except KeyError:
            raise KeyError(f"unknown parameter '{name}'") from None

    def __getitem__(self, name: str) -> Tensor:
        return self.value(name)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def names(self) -> List[str]:
        return list(self._entries)

    def entry(self, name: str) -> ParameterEntry:
        return self._entries[name]

    def items(self) -> Iterator[Tuple[str, ParameterEntry]]:
        return iter(self._entries.items())

    def buffer(self, name: str) -> RunningStats:
        return self._buffers[name]

    def buffers(self) -> Iterator[Tuple[str, RunningStats]]:
        return iter(self._buffers.items())

    def num_parameters(self, prefix: str = "") -> int:
        """Scalar count of trainable parameters, optionally restricted to a name prefix."""
        return int(
            sum(e.tensor.size for n, e in self._entries.items() if not prefix or n == prefix or n.startswith(prefix + "."))
        )

    def zero_grad(self) -> None:
        for entry in self._entries.values():
            entry.tensor.grad = None

    # --- Overrides ---

    @contextlib.contextmanager
    def override(self, mapping: Mapping[str, ArrayLike]) -> Iterator[None]:
        """
        Temporarily substitute parameters by name.

        Layers read their weights through `value()` at call time, so a forward pass inside
        the block sees the substitutes. Passing tensors that require grad lets callers
        differentiate a composite layer with respect to its parameters.
        """
        previous = dict(self._overrides)
        for name, value in mapping.items():
            if name not in self._entries:
                raise KeyError(f"unknown parameter '{name}'")
            tensor = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=self._entries[name].tensor.dtype))
            if tensor.shape != self._entries[name].tensor.shape:
                raise DimensionError(f"override for '{name}' has shape {tensor.shape}, expected {self._entries[name].tensor.shape}")
            self._overrides[name] = tensor
        try:
            yield
        finally:
            self._overrides = previous

    # --- Serialization helpers ---

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Parameters in store order, then buffers as `<name>.running_mean` / `<name>.running_var`."""
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, entry in self._entries.items():
            state[name] = entry.tensor.data
        for name, stats in self._buffers.items():
            state[f"{name}.running_mean"] = stats.mean
            state[f"{name}.running_var"] = stats.var
        return state

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """
        Replace parameter values and buffers from `arrays` (as produced by `state_arrays`).

        Raises:
            ConfigError: Missing or unexpected names, or shape mismatches.
        """
        expected = self.state_arrays()
        missing = [n for n in expected if n not in arrays]
        unexpected = [n for n in arrays if n not in expected]
        if missing or unexpected:
            raise ConfigError(
                f"checkpoint does not match model: missing={missing[:3]} unexpected={unexpected[:3]}"
            )
        for name, array in arrays.items():
            if tuple(array.shape) != tuple(expected[name].shape):
                raise ConfigError(f"checkpoint tensor '{name}' has shape {array.shape}, expected {expected[name].shape}", key=name)
        for name, entry in self._entries.items():
            entry.tensor.data = np.array(arrays[name], dtype=entry.tensor.dtype)
            entry.exp_avg[...] = 0.0
            entry.exp_avg_sq[...] = 0.0
        for name, stats in self._buffers.items():
            stats.mean[...] = arrays[f"{name}.running_mean"]
            stats.var[...] = arrays[f"{name}.running_var"]
        self.step_count = 0
        logger.debug(f"LOADED: {len(self._entries)} parameters | {len(self._buffers)} buffers")
