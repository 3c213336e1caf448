#!/usr/bin/env python3
"""
Calibration Manager - collects f32 activation statistics and dispatches to calibrators
"""

import dataclasses
import logging
from typing import Dict, List, Optional

import numpy as np

from calibrators.base_calibrator import BaseCalibrator
from calibrators.kl_calibrator import KLCalibrator
from calibrators.maxabs_calibrator import MaxAbsCalibrator
from errors import CalibrationError
from model_graph import GraphExecutor, check_batch
from models import LayerSpec, ModelGraph, QuantParams, Tensor
from pooling import fit_netvlad_codes
from utils import CalibrationMethod, Granularity, PoolingKind

logger = logging.getLogger(__name__)

ACTIVATION_BITS = 8
CALIB_BATCH = 64


class ActivationRecorder(GraphExecutor):
    """f32 executor that keeps the input of every quantizable layer and the pooling head"""

    def __init__(self, model: ModelGraph):
        super().__init__(model)
        self.inputs: Dict[int, List[np.ndarray]] = {}

    def observe(self, layer: LayerSpec, x: np.ndarray) -> None:
        self.inputs.setdefault(layer.index, []).append(x)


class CalibrationManager:
    """Registry of calibrators keyed by CalibrationMethod"""

    def __init__(self, debug: bool = False):
        self.debug = debug
        self.calibrators: Dict[CalibrationMethod, BaseCalibrator] = {}
        self._initialize_calibrators()

    def _initialize_calibrators(self):
        for calibrator in (MaxAbsCalibrator(debug=self.debug), KLCalibrator(debug=self.debug)):
            self.calibrators[calibrator.method] = calibrator

    def get(self, method: CalibrationMethod) -> BaseCalibrator:
        try:
            return self.calibrators[CalibrationMethod(method)]
        except (KeyError, ValueError):
            raise CalibrationError(f"no calibrator registered for {method!r}")

    def collect_activations(self, model: ModelGraph, calib) -> Dict[int, np.ndarray]:
        """One f32 pass over the calibration sample; flattened inputs per observed layer"""
        batch = check_batch(model, calib) if calib is not None and len(calib) else None
        if batch is None or batch.shape[0] == 0:
            raise CalibrationError("calibration sample is empty")

        recorder = ActivationRecorder(model)
        for start in range(0, batch.shape[0], CALIB_BATCH):
            recorder.run(batch[start:start + CALIB_BATCH])
        return {index: np.concatenate([a.reshape(-1) for a in arrays])
                for index, arrays in recorder.inputs.items()}

    def activation_params(self, model: ModelGraph, calib,
                          method: CalibrationMethod = CalibrationMethod.MAXABS,
                          bits: int = ACTIVATION_BITS) -> Dict[int, QuantParams]:
        """Per-tensor activation scales for every quantizable layer input and the head input"""
        calibrator = self.get(method)
        activations = self.collect_activations(model, calib)
        params = {}
        for index, values in sorted(activations.items()):
            params[index] = calibrator.calibrate(values, bits, Granularity.PER_TENSOR)
            logger.debug("Layer %d activation scale %.6g (%s, %d values)",
                         index, float(params[index].scale[0]), calibrator.method.value, values.size)
        logger.info("Calibrated %d activation scales with %s over %d samples",
                    len(params), calibrator.method.value, len(calib))
        return params

    def weight_params(self, weights: np.ndarray, bits: int,
                      method: CalibrationMethod = CalibrationMethod.MAXABS,
                      granularity: Granularity = Granularity.PER_CHANNEL) -> QuantParams:
        return self.get(method).calibrate(weights, bits, granularity)


_default_manager: Optional[CalibrationManager] = None


def default_manager() -> CalibrationManager:
    global _default_manager
    if _default_manager is None:
        _default_manager = CalibrationManager()
    return _default_manager


def fit_head_codes(model: ModelGraph, calib, seed: int) -> ModelGraph:
    """Replace NetVLAD codes with seeded k-means centroids of the head's local features"""
    head = model.head()
    if head.pooling is not PoolingKind.NETVLAD:
        return model
    batch = check_batch(model, calib)
    recorder = ActivationRecorder(model)
    for start in range(0, batch.shape[0], CALIB_BATCH):
        recorder.run(batch[start:start + CALIB_BATCH])
    features = np.concatenate(recorder.inputs[head.index])
    local = features.transpose(0, 2, 3, 1).reshape(-1, features.shape[1])
    codes = fit_netvlad_codes(local, head.attrs['clusters'], seed)

    weights = dict(model.weights)
    weights[head.params['codes']] = Tensor.from_array(codes)
    logger.info("Fitted %d NetVLAD codes over %d local features", codes.shape[0], local.shape[0])
    return dataclasses.replace(model, weights=weights)
