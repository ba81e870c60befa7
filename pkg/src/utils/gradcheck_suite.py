"""
Registered finite-difference suite behind `convformer gradcheck`.

Primitive operations are checked in float64 at tol 1e-4 over 20 seeds. Composite layers
are differentiated with respect to their inputs and every parameter: the parameters are
drawn around their initial values and injected with `ParameterStore.override`, which also
moves the zero-initialized sampling offsets off the pixel centers. The deformable
attention block and the Enhanced DeTrans layer run in float32 at tol 1e-2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src.errors import ConfigError
from src.model.config import ModelConfig
from src.model.convformer import ConvFormer
from src.model.deform_attn import MsMhsaParams, make_reference_points, ms_mhsa, unflatten_multiscale
from src.model.detrans import EnhancedDeTransLayer, FeedForwardParams, conv_based_ffm, enhanced_detrans_layer, ffm
from src.model.layers import DepthwiseConv2d, Module
from src.model.positional import EnhancedPositionalEncoding
from src.tensor import functional as F
from src.tensor.gradcheck import GradCheckReport, InputSampler, grad_check
from src.tensor.parameters import ParameterStore
from src.tensor.tensor import Tensor

logger = logging.getLogger(__name__)

PRIMITIVE_SEEDS = 20
COMPOSITE_SEEDS = 5
LEVEL_SHAPES = [(4, 4), (2, 2)]
PARAM_JITTER = 0.3


@dataclass
class CaseSetup:
    op: Callable[..., Tensor]
    sampler: InputSampler
    input_names: List[str]
    wrt: Optional[List[int]] = None


@dataclass(frozen=True)
class GradCase:
    """
    One registered check.

    Attributes:
        build (Callable[[int], CaseSetup]): Builds the operation for a seed.
        seeds (int): Number of seeds (each its own randomized check).
    """

    name: str
    build: Callable[[int], CaseSetup]
    tol: float = 1e-4
    h: float = 1e-5
    seeds: int = PRIMITIVE_SEEDS
    dtype: type = np.float64
    max_coords: Optional[int] = None


@dataclass
class CaseResult:
    name: str
    reports: List[GradCheckReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.reports), default=0.0)

    @property
    def excluded_coords(self) -> int:
        return sum(r.excluded_coords for r in self.reports)


def _normal(*shapes):
    return lambda rng: [rng.standard_normal(s) for s in shapes]


def _primitive(op: Callable[..., Tensor], sampler: InputSampler, names: Sequence[str]) -> Callable[[int], CaseSetup]:
    return lambda seed: CaseSetup(op, sampler, list(names))


def _parametrized(
    module: Module,
    call: Callable[..., Tensor],
    draw_inputs: InputSampler,
    input_names: Sequence[str],
    names: Optional[Sequence[str]] = None,
) -> CaseSetup:
    """Differentiate `call(*inputs)` with respect to its inputs and the named parameters."""
    store = module.store
    names = list(names if names is not None else module.parameter_names())
    base = [store.value(n).data.astype(np.float64) for n in names]
    count = len(input_names)

    def op(*tensors: Tensor) -> Tensor:
        with store.override(dict(zip(names, tensors[count:]))):
            return call(*tensors[:count])

    def sampler(rng: np.random.Generator):
        return list(draw_inputs(rng)) + [b + rng.normal(0.0, PARAM_JITTER, b.shape) for b in base]

    return CaseSetup(op, sampler, list(input_names) + names)


# --- Composite builders ---


def _tokens(rng: np.random.Generator, channels: int = 8):
    count = sum(h * w for h, w in LEVEL_SHAPES)
    return [rng.standard_normal((1, count, channels)), rng.standard_normal((1, count, channels))]


def _build_epe(seed: int) -> CaseSetup:
    module = EnhancedPositionalEncoding(ParameterStore(seed), "epe", channels=8)
    return _parametrized(module, module, _normal((2, 8, 4, 4)), ["x"])


def _build_ffm(seed: int) -> CaseSetup:
    module = FeedForwardParams(ParameterStore(seed), "ffm", channels=8, expansion=2)
    return _parametrized(module, lambda x: ffm(x, module), _normal((2, 5, 8)), ["x"])


def _build_conv_ffm(seed: int) -> CaseSetup:
    store = ParameterStore(seed)
    root = Module(store, "")
    params = root.child(FeedForwardParams(store, "ffm", channels=8, expansion=2))
    dw = root.child(DepthwiseConv2d(store, "dw", channels=8))
    count = sum(h * w for h, w in LEVEL_SHAPES)
    return _parametrized(root, lambda x: conv_based_ffm(x, LEVEL_SHAPES, params, dw), _normal((1, count, 8)), ["x"])


def _build_ms_mhsa(seed: int) -> CaseSetup:
    module = MsMhsaParams(ParameterStore(seed), "attn", channels=8, num_levels=2, num_heads=2, num_points=2)
    refs = make_reference_points(LEVEL_SHAPES, batch_size=1)

    def call(query: Tensor, pos: Tensor) -> Tensor:
        return ms_mhsa(query, pos, unflatten_multiscale(query, LEVEL_SHAPES), refs, module)

    return _parametrized(module, call, _tokens, ["query", "pos"])


def _build_detrans_layer(seed: int) -> CaseSetup:
    module = EnhancedDeTransLayer(
        ParameterStore(seed), "layer", channels=8, num_levels=2, num_heads=2, num_points=2, expansion=2
    )
    refs = make_reference_points(LEVEL_SHAPES, batch_size=1)
    return _parametrized(
        module, lambda x, pos: enhanced_detrans_layer(x, pos, refs, LEVEL_SHAPES, module), _tokens, ["x", "pos"]
    )


SPOT_CHECK_CONFIG = ModelConfig(
    stage_channels=(4, 8, 12, 16),
    stem_conv_blocks=1,
    num_heads=2,
    num_points=2,
    encoder_layers=1,
    ffm_expansion=2,
    encoder_channels=8,
)
SPOT_CHECK_PARAMS = 8


def _build_convformer(seed: int) -> CaseSetup:
    model = ConvFormer(SPOT_CHECK_CONFIG, seed=seed)
    setup = _parametrized(model, lambda x: model(x).logits, _normal((2, 1, 16, 16)), ["x"])
    picks = np.random.default_rng(seed).choice(len(setup.input_names) - 1, size=SPOT_CHECK_PARAMS, replace=False)
    setup.wrt = sorted(int(i) + 1 for i in picks)
    return setup


def _points(rng: np.random.Generator):
    return [rng.standard_normal((2, 3, 4, 5)), rng.uniform(0.05, 0.95, size=(2, 6, 2))]


REGISTRY: Dict[str, GradCase] = {
    case.name: case
    for case in [
        GradCase("conv2d", _primitive(lambda x, w, b: F.conv2d(x, w, b, padding=1), _normal((2, 3, 5, 5), (4, 3, 3, 3), (4,)), ["x", "weight", "bias"])),
        GradCase("conv2d_strided", _primitive(lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1), _normal((2, 3, 6, 6), (4, 3, 3, 3), (4,)), ["x", "weight", "bias"])),
        GradCase("dwconv2d", _primitive(lambda x, w, b: F.dwconv2d(x, w, b), _normal((2, 3, 5, 5), (3, 1, 3, 3), (3,)), ["x", "weight", "bias"])),
        GradCase("transpose_conv2d", _primitive(lambda x, w, b: F.transpose_conv2d(x, w, b, stride=2), _normal((2, 3, 3, 3), (3, 4, 2, 2), (4,)), ["x", "weight", "bias"])),
        GradCase("linear", _primitive(F.linear, _normal((4, 3), (3, 5), (5,)), ["x", "weight", "bias"])),
        GradCase("layer_norm", _primitive(F.layer_norm, _normal((3, 6), (6,), (6,)), ["x", "gamma", "beta"])),
        GradCase("batch_norm", _primitive(lambda x, g, b: F.batch_norm(x, g, b, training=True), _normal((2, 3, 4, 4), (3,), (3,)), ["x", "gamma", "beta"])),
        GradCase("gelu", _primitive(F.gelu, _normal((10,)), ["x"])),
        GradCase("relu", _primitive(F.relu, _normal((12,)), ["x"])),
        GradCase("softmax", _primitive(F.softmax, _normal((3, 5)), ["x"])),
        GradCase("log_softmax", _primitive(F.log_softmax, _normal((3, 5)), ["x"])),
        GradCase("bilinear_sample", _primitive(F.bilinear_sample, _points, ["featmap", "points"])),
        GradCase("epe", _build_epe, seeds=COMPOSITE_SEEDS),
        GradCase("ffm", _build_ffm, seeds=COMPOSITE_SEEDS),
        GradCase("conv_based_ffm", _build_conv_ffm, seeds=COMPOSITE_SEEDS, max_coords=40),
        GradCase("ms_mhsa", _build_ms_mhsa, tol=1e-2, h=1e-2, seeds=COMPOSITE_SEEDS, dtype=np.float32, max_coords=30),
        GradCase("enhanced_detrans_layer", _build_detrans_layer, tol=1e-2, h=1e-2, seeds=COMPOSITE_SEEDS, dtype=np.float32, max_coords=30),
        GradCase("convformer", _build_convformer, tol=1e-2, h=1e-5, seeds=2, max_coords=4),
    ]
}


def run_case(name: str, seeds: Optional[int] = None) -> CaseResult:
    """
    Run one registered case.

    Raises:
        ConfigError: Unknown case name.
    """
    if name not in REGISTRY:
        raise ConfigError(f"unknown gradcheck scope '{name}' (choose 'all' or one of {', '.join(REGISTRY)})", key="scope")
    case = REGISTRY[name]
    result = CaseResult(name=name)
    for seed in range(case.seeds if seeds is None else seeds):
        setup = case.build(seed)
        result.reports.append(
            grad_check(
                setup.op,
                setup.sampler,
                h=case.h,
                tol=case.tol,
                seed=seed,
                name=f"{name}[{seed}]",
                wrt=setup.wrt,
                input_names=setup.input_names,
                max_coords=case.max_coords,
                dtype=case.dtype,
            )
        )
    status = "PASS" if result.passed else "FAIL"
    logger.info(f"GRADCHECK: {name} | MAX_REL_ERR: {result.max_rel_error:.3e} | {status}")
    return result


def run_suite(scope: str = "all", seeds: Optional[int] = None) -> List[CaseResult]:
    """
    Run every case (`scope="all"`) or a single named case.

    Raises:
        ConfigError: Unknown scope.
    """
    names = list(REGISTRY) if scope == "all" else [scope]
    if scope != "all" and scope not in REGISTRY:
        raise ConfigError(f"unknown gradcheck scope '{scope}' (choose 'all' or one of {', '.join(REGISTRY)})", key="scope")
    return [run_case(name, seeds) for name in names]
