#!/usr/bin/env python3
"""
Latency benchmarking, the linear retrieval-latency model
tau_r ~= k1*D + k2*N, descriptor-dimension planning and memory budgeting.
"""

import logging
import time
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from threadpoolctl import threadpool_limits

from errors import ConfigError, InfeasibleBudgetError
from models import (
    DescriptorDB,
    LatencyModel,
    LatencySample,
    MemoryBudget,
    MemoryCheck,
    ModelGraph,
    PlanResult,
    QuantizedModel,
)
from quant_engine import forward
from retrieval_eval import search_topk
from utils import l2_normalize_rows

logger = logging.getLogger(__name__)

SUPPORTED_DIMS = (512, 1024, 2048, 4096)
WARMUP = 2
MIN_REPETITIONS = 3
BYTES_PER_ELEMENT = 4


def median_time(fn: Callable[[], object], repetitions: int, warmup: int = WARMUP) -> float:
    """Median wall-clock seconds of `fn` over repetitions, warm-up runs excluded"""
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return float(np.median(timings))


def precision_label(model: Union[ModelGraph, QuantizedModel]) -> str:
    if not isinstance(model, QuantizedModel):
        return "f32"
    bits = set(model.config.bits)
    if bits == {16}:
        return "f16"
    if len(bits) == 1:
        return f"int{bits.pop()}"
    return "mixed"


def encode_latency(model: Union[ModelGraph, QuantizedModel], image: np.ndarray,
                   repetitions: int = MIN_REPETITIONS) -> float:
    """Median seconds of one forward pass over a single image, BLAS pinned to one thread"""
    batch = np.asarray(image, dtype=np.float32).reshape((1,) + tuple(model.input_shape))
    with threadpool_limits(limits=1, user_api="blas"):
        return median_time(lambda: forward(model, batch), repetitions)


def bench_latency(model: Union[ModelGraph, QuantizedModel], n_list: Sequence[int], d_list: Sequence[int],
                  repetitions: int = 5, seed: int = 0, threads: int = 1) -> List[LatencySample]:
    """Median encode latency of one forward pass and top-1 retrieval latency per (N, D).

    BLAS runs single-threaded throughout; `threads` > 1 splits retrieval over
    row blocks on a thread pool instead.
    """
    if repetitions < MIN_REPETITIONS:
        raise ConfigError(f"repetitions must be >= {MIN_REPETITIONS}, got {repetitions}")
    if not n_list or not d_list or min(n_list) < 1 or min(d_list) < 1:
        raise ConfigError("N and D grids must be non-empty positive integers")

    rng = np.random.default_rng(seed)
    image = rng.standard_normal(tuple(model.input_shape)).astype(np.float32)
    tau_e = encode_latency(model, image, repetitions)
    label = precision_label(model)
    logger.info("Encode latency (%s): %.6f s", label, tau_e)

    samples = []
    with threadpool_limits(limits=1, user_api="blas"):
        for n in n_list:
            for d in d_list:
                db = DescriptorDB(descriptors=l2_normalize_rows(rng.standard_normal((n, d))),
                                  place_ids=np.arange(n, dtype=np.int32))
                query = l2_normalize_rows(rng.standard_normal(d))
                tau_r = median_time(lambda: search_topk(db, query, 1, threads=threads), repetitions)
                samples.append(LatencySample(n=n, dim=d, tau_e=tau_e, tau_r=tau_r,
                                             precision=label, repetitions=repetitions))
                logger.debug("N=%d D=%d tau_r=%.6f s", n, d, tau_r)
    return samples


def fit_k1_k2(samples: Sequence[LatencySample]) -> LatencyModel:
    """Least-squares tau_r ~= k1*D + k2*N (no intercept), coefficients clamped at 0"""
    if len(samples) < 2:
        raise ConfigError(f"need at least 2 latency samples, got {len(samples)}")
    dims = np.array([s.dim for s in samples], dtype=np.float64)
    sizes = np.array([s.n for s in samples], dtype=np.float64)
    tau_r = np.array([s.tau_r for s in samples], dtype=np.float64)
    design = np.column_stack([dims, sizes])
    if np.linalg.matrix_rank(design) < 2:
        raise ConfigError("latency samples are rank-deficient: D and N must not be proportional")
    if len(samples) < 3 or len(np.unique(sizes)) < 2:
        logger.warning("Latency fit from %d samples over %d map size(s); k2 is weakly determined",
                       len(samples), len(np.unique(sizes)))

    (k1, k2), *_ = np.linalg.lstsq(design, tau_r, rcond=None)
    return LatencyModel(
        k1=max(0.0, float(k1)),
        k2=max(0.0, float(k2)),
        tau_e=float(np.median([s.tau_e for s in samples])),
        n_range=(int(sizes.min()), int(sizes.max())),
        d_range=(int(dims.min()), int(dims.max())),
    )


def plan_dim(t_lat: float, n: int, model: LatencyModel, tau_e: Optional[float] = None,
             dims: Sequence[int] = SUPPORTED_DIMS) -> PlanResult:
    """Largest supported D with tau_e + k1*D + k2*N <= t_lat.

    raw D = (t_lat - tau_e - k2*N) / k1
    """
    tau_e = model.tau_e if tau_e is None else tau_e
    dims = sorted(int(d) for d in dims)
    if not dims:
        raise ConfigError("no supported descriptor dimensions given")
    available = t_lat - tau_e - model.k2 * n

    if available <= 0:
        return PlanResult(feasible=False, dimension=None, raw_dimension=0.0, slack=available,
                          reason="latency target does not exceed encode plus map-size time")
    if model.k1 == 0:
        dimension, raw = dims[-1], float('inf')
    else:
        raw = available / model.k1
        eligible = [d for d in dims if d <= raw]
        if not eligible:
            return PlanResult(feasible=False, dimension=None, raw_dimension=raw, slack=available,
                              reason=f"raw dimension {raw:.1f} is below the smallest supported {dims[0]}")
        dimension = eligible[-1]

    slack = t_lat - (tau_e + model.predict_retrieval(dimension, n))
    logger.debug("plan: available %.6f s, raw D %.1f, chose %d (slack %.6f s)", available, raw, dimension, slack)
    return PlanResult(feasible=True, dimension=dimension, raw_dimension=raw, slack=slack)


def require_plan(t_lat: float, n: int, model: LatencyModel, tau_e: Optional[float] = None,
                 dims: Sequence[int] = SUPPORTED_DIMS) -> int:
    plan = plan_dim(t_lat, n, model, tau_e, dims)
    if not plan.feasible:
        raise InfeasibleBudgetError(plan.reason)
    return plan.dimension


def literal_descriptor_dim(t_lat: float, n: int, model: LatencyModel, tau_e: Optional[float] = None) -> float:
    """(t_lat - k2*N) / k1 + tau_e, the arrangement with tau_e outside the fraction.

    Mixes seconds into a dimension count; kept for comparison with plan_dim only.
    """
    tau_e = model.tau_e if tau_e is None else tau_e
    if model.k1 == 0:
        return float('inf')
    return (t_lat - model.k2 * n) / model.k1 + tau_e


def database_bytes(n: int, dim: int) -> int:
    return int(n) * int(dim) * BYTES_PER_ELEMENT


def check_memory(budget: MemoryBudget) -> MemoryCheck:
    """Passes iff memory > N*D*4 bytes (f32 descriptors)"""
    if budget.memory_bytes <= 0 or budget.n <= 0 or budget.dim <= 0:
        raise ConfigError("memory budget, N and D must all be positive")
    required = database_bytes(budget.n, budget.dim)
    return MemoryCheck(passed=budget.memory_bytes > required, required_bytes=required,
                       memory_bytes=budget.memory_bytes)
