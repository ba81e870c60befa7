"""
Finite-Difference Gradient Checking.

`grad_check` compares the analytic gradients produced by `Tensor.backward` with central
differences of a scalar objective. The objective is the inner product of the operation's
output with a fixed random cotangent, evaluated in float64, so every output element takes
part in the check.

Coordinates where the function is not differentiable (a ReLU within `h` of zero, a
bilinear sample landing on a pixel center) are detected by comparing the difference
quotients at `h` and `h / 2`. When the inputs come from a sampler the case is redrawn;
after the last attempt the remaining kink coordinates are excluded and reported. An input
whose every coordinate was excluded verified nothing, so the report fails.
"""

from __future__ import annotations

import logging
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field

from src.errors import ConfigError
from src.tensor.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

MAX_RESAMPLES = 5
KINK_SHARE = 0.2

InputSampler = Callable[[np.random.Generator], Sequence[np.ndarray]]


class InputCheck(BaseModel):
    """Result for one differentiated input."""

    index: int
    name: str
    rel_error: float
    checked_coords: int
    kink_coords: int = 0


class GradCheckReport(BaseModel):
    """
    Outcome of one finite-difference check.

    Attributes:
        name (str): Label of the checked operation.
        tol (float): Pass threshold on the relative error.
        h (float): Nominal finite-difference step.
        inputs (List[InputCheck]): Per-input relative errors.
        resamples (int): Number of times the inputs were redrawn because of kinks.
        excluded_coords (int): Kink coordinates left out of the final comparison.
    """

    name: str
    tol: float
    h: float
    seed: int = 0
    inputs: List[InputCheck] = Field(default_factory=list)
    resamples: int = 0
    excluded_coords: int = 0

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.inputs), default=0.0)

    @property
    def inconclusive(self) -> bool:
        return any(c.checked_coords == 0 for c in self.inputs)

    @property
    def passed(self) -> bool:
        return not self.inconclusive and self.max_rel_error <= self.tol


def _objective(
    op: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    cotangent: np.ndarray,
) -> float:
    with no_grad():
        out = op(*(Tensor(a, dtype=a.dtype) for a in arrays))
    return float(np.sum(out.data.astype(np.float64) * cotangent))


def _central(op, arrays, cotangent, index, coord, h) -> tuple[float, float, float]:
    """Central, forward and backward difference quotients at one coordinate (actual stored steps)."""
    target = arrays[index]
    original = target[coord]
    plus = np.asarray(original + h, dtype=target.dtype)
    minus = np.asarray(original - h, dtype=target.dtype)
    step_up = float(plus) - float(original)
    step_down = float(original) - float(minus)
    if step_up == 0.0 or step_down == 0.0:
        raise ConfigError(f"step h={h} vanishes at {float(original)!r} in {target.dtype}", key="h")

    target[coord] = plus
    f_plus = _objective(op, arrays, cotangent)
    target[coord] = minus
    f_minus = _objective(op, arrays, cotangent)
    target[coord] = original
    return f_plus, f_minus, step_up + step_down


def grad_check(
    op: Callable[..., Tensor],
    inputs: Union[Sequence[np.ndarray], InputSampler],
    h: float = 1e-3,
    tol: float = 1e-4,
    seed: int = 0,
    name: str = "op",
    wrt: Optional[Sequence[int]] = None,
    input_names: Optional[Sequence[str]] = None,
    max_coords: Optional[int] = None,
    dtype: Optional[Union[np.dtype, type]] = None,
) -> GradCheckReport:
    """
    Check the analytic gradients of `op` against central finite differences.

    Args:
        op: Differentiable callable taking Tensors, returning a Tensor.
        inputs: Input arrays, or a sampler `rng -> arrays` that allows redraws on kinks.
        h: Finite-difference step.
        tol: Pass threshold on the per-input relative error
            `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)`.
        seed: Seeds the cotangent, coordinate subsampling and sampler draws.
        name: Label used in the report.
        wrt: Indices of the inputs to differentiate (default: all).
        input_names: Optional labels for the inputs.
        max_coords: Check at most this many randomly chosen coordinates per input.
        dtype: Cast inputs to this dtype (default: keep the dtype of each array).

    Returns:
        GradCheckReport: Per-input errors; `passed` iff every error is within `tol` and every
        input kept at least one coordinate.

    Raises:
        ConfigError: `h` rounds away to nothing at some coordinate in the working dtype.
    """
    rng = np.random.default_rng(seed)
    sampler = inputs if callable(inputs) else None
    fixed = None if sampler is not None else [np.asarray(a) for a in inputs]

    resamples = 0
    while True:
        raw = sampler(rng) if sampler is not None else fixed
        arrays = [np.array(a, dtype=dtype if dtype is not None else (a.dtype if a.dtype == np.float64 else np.float32)) for a in raw]
        selected = list(range(len(arrays))) if wrt is None else list(wrt)
        checks, kinks = _check_once(op, arrays, selected, h, tol, rng, max_coords, input_names)
        if not any(kinks.values()) or sampler is None or resamples >= MAX_RESAMPLES:
            break
        resamples += 1
        logger.debug(f"GRADCHECK: {name} | KINKS: {sum(map(len, kinks.values()))} | RESAMPLE: {resamples}")

    report = GradCheckReport(
        name=name,
        tol=tol,
        h=h,
        seed=seed,
        inputs=checks,
        resamples=resamples,
        excluded_coords=sum(len(v) for v in kinks.values()),
    )
    status = "PASS" if report.passed else ("INCONCLUSIVE" if report.inconclusive else "FAIL")
    logger.info(f"GRADCHECK: {name} | MAX_REL_ERR: {report.max_rel_error:.3e} | {status}")
    return report


def _check_once(op, arrays, selected, h, tol, rng, max_coords, input_names):
    tensors = [Tensor(a.copy(), requires_grad=i in selected, dtype=a.dtype) for i, a in enumerate(arrays)]
    out = op(*tensors)
    cotangent = rng.standard_normal(out.shape)
    out.backward(cotangent.astype(out.dtype))

    checks: List[InputCheck] = []
    kinks = {}
    for index in selected:
        analytic_full = tensors[index].grad
        if analytic_full is None:
            analytic_full = np.zeros(arrays[index].shape)
        coords = list(np.ndindex(arrays[index].shape))
        if max_coords is not None and len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]

        analytic = np.array([float(analytic_full[c]) for c in coords], dtype=np.float64)
        numeric = np.empty_like(analytic)
        for n, coord in enumerate(coords):
            f_plus, f_minus, span = _central(op, arrays, cotangent, index, coord, h)
            numeric[n] = (f_plus - f_minus) / span

        error = np.abs(analytic - numeric)
        kink_set, tested = set(), set()
        f_center = None
        # excluding a kink shrinks the scale, which can turn more coordinates into suspects
        while True:
            keep = np.array([n not in kink_set for n in range(len(coords))], dtype=bool)
            if not keep.any():
                break
            scale = max(np.abs(analytic[keep]).max(), np.abs(numeric[keep]).max(), 1e-6)
            suspects = [int(n) for n in np.nonzero(keep & (error > tol * scale))[0] if int(n) not in tested]
            if not suspects:
                break
            if f_center is None:
                f_center = _objective(op, arrays, cotangent)
            for n in suspects:
                tested.add(n)
                if _is_kink(op, arrays, cotangent, index, coords[n], h, numeric[n], f_center, tol * scale, error[n]):
                    kink_set.add(n)

        rel = float(error[keep].max() / scale) if keep.any() else 0.0
        label = input_names[index] if input_names is not None and index < len(input_names) else f"input{index}"
        checks.append(
            InputCheck(index=index, name=label, rel_error=rel, checked_coords=int(keep.sum()), kink_coords=len(kink_set))
        )
        kinks[index] = kink_set
    return checks, kinks


def _is_kink(op, arrays, cotangent, index, coord, h, numeric_h, f_center, threshold, error) -> bool:
    """
    A coordinate is non-smooth when its difference quotients do not converge as the step
    halves: either the central estimate moves by a sizeable share of its disagreement with
    the analytic value, or the one-sided gap fails to shrink. A wrong analytic gradient on a
    smooth function leaves the central estimate in place and is not mistaken for a kink.
    """
    f_plus, f_minus, span = _central(op, arrays, cotangent, index, coord, h)
    f_plus_half, f_minus_half, span_half = _central(op, arrays, cotangent, index, coord, h / 2)
    numeric_half = (f_plus_half - f_minus_half) / span_half
    moved = abs(numeric_half - numeric_h)
    if moved > threshold or moved > KINK_SHARE * error:
        return True
    gap = (f_plus - f_center) / (span / 2) - (f_center - f_minus) / (span / 2)
    gap_half = (f_plus_half - f_center) / (span_half / 2) - (f_center - f_minus_half) / (span_half / 2)
    return abs(gap) > threshold and abs(gap_half) > 0.75 * abs(gap)
