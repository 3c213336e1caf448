#!/usr/bin/env python3
"""
Design-space sweeps over the quantization pipeline.

Design grid: backbone family x pooling head x precision (f32, f16, int8)
-> recall@1 on a place dataset, container size and encode latency.
Budget sweep: genetic search under each average bit-width budget, then the
same measurements for the winning configuration.

References double as the calibration sample, as with the CLI's data/refs.
"""

import dataclasses
import logging
from typing import List, Sequence, Tuple, Union

from calibration_manager import fit_head_codes
from errors import ConfigError
from model_graph import build_backbone, fuse_conv_bn
from model_io import serialize_model
from models import (
    ArchConfig,
    BudgetPoint,
    DesignPoint,
    ModelGraph,
    PlaceDataset,
    PrecisionConfig,
    QuantizedModel,
    SearchConfig,
)
from mp_search import FitnessEvaluator, run_search, sensitivity_profile
from perf_model import MIN_REPETITIONS, encode_latency
from quant_engine import quantize_model
from retrieval_eval import encode_dataset, recall_at_k
from utils import CalibrationMethod, PoolingKind

logger = logging.getLogger(__name__)

SWEEP_PRECISIONS = ("f32", "f16", "int8")
SWEEP_BUDGETS = (16.0, 12.0, 10.0, 8.0, 6.0)
PRECISION_BITS = {"f16": 16, "int8": 8, "int4": 4}

Model = Union[ModelGraph, QuantizedModel]


def precision_variant(model: ModelGraph, label: str, calib,
                      method: CalibrationMethod = CalibrationMethod.MAXABS) -> Model:
    """f32 returns the graph; f16/int8/int4 quantize every layer homogeneously"""
    if label == "f32":
        return model
    bits = PRECISION_BITS.get(label)
    if bits is None:
        raise ConfigError(f"unknown precision '{label}' (expected f32 or one of {', '.join(PRECISION_BITS)})")
    config = PrecisionConfig([bits] * len(model.quantizable_layers()))
    return quantize_model(model, config, calib if bits < 16 else None, method)


def measure(model: Model, dataset: PlaceDataset, repetitions: int = MIN_REPETITIONS,
            timing: bool = True) -> Tuple[float, int, float]:
    """(recall@1, VPRQ bytes, encode seconds); encode time is 0.0 without timing"""
    refs = encode_dataset(model, dataset, "references")
    queries = encode_dataset(model, dataset, "queries")
    recall = recall_at_k(queries, refs, dataset.ground_truth, 1)
    tau_e = encode_latency(model, dataset.queries[0], repetitions) if timing else 0.0
    return recall, len(serialize_model(model)), tau_e


def sweep_design(base: ArchConfig, dataset: PlaceDataset, families: Sequence[str],
                 poolings: Sequence[str], precisions: Sequence[str] = SWEEP_PRECISIONS,
                 method: CalibrationMethod = CalibrationMethod.MAXABS,
                 repetitions: int = MIN_REPETITIONS, timing: bool = True) -> List[DesignPoint]:
    """Build, fuse and quantize every family x pooling pair; one row per precision"""
    if not families or not poolings or not precisions:
        raise ConfigError("design sweep needs at least one family, pooling head and precision")
    calib = dataset.references
    points = []
    for family in families:
        for pooling in poolings:
            cfg = dataclasses.replace(base, family=family, pooling=PoolingKind(pooling),
                                      input_shape=tuple(dataset.references.shape[1:]))
            graph = fuse_conv_bn(fit_head_codes(build_backbone(cfg), calib, cfg.seed))
            for label in precisions:
                model = precision_variant(graph, label, calib, method)
                recall, size, tau_e = measure(model, dataset, repetitions, timing)
                logger.info("%s/%s/%s: recall@1=%.4f, %d bytes", family, pooling, label, recall, size)
                points.append(DesignPoint(family, pooling, label, recall, size, tau_e))
    return points


def sweep_budgets(model: ModelGraph, dataset: PlaceDataset, cfg: SearchConfig,
                  budgets: Sequence[float] = SWEEP_BUDGETS,
                  method: CalibrationMethod = CalibrationMethod.MAXABS,
                  repetitions: int = MIN_REPETITIONS, timing: bool = True) -> List[BudgetPoint]:
    """run_search under each budget with one shared fitness cache and sensitivity profile"""
    if not budgets:
        raise ConfigError("budget sweep needs at least one budget")
    model = model if model.is_fused else fuse_conv_bn(model)
    calib = dataset.references
    evaluator = FitnessEvaluator(model, calib, cfg.fitness_samples, cfg.threads, method)
    profile = sensitivity_profile(model, calib, evaluator)

    points = []
    for budget in budgets:
        result = run_search(model, calib, dataclasses.replace(cfg, budget=float(budget)),
                            evaluator=evaluator, profile=profile)
        qmodel = quantize_model(model, result.best, calib, method)
        recall, size, tau_e = measure(qmodel, dataset, repetitions, timing)
        logger.info("B=%g: [%s] recall@1=%.4f, %d bytes", budget, result.best, recall, size)
        points.append(BudgetPoint(float(budget), result.best, result.best_fitness, recall, size, tau_e))
    return points
