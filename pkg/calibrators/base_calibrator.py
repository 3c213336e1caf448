#!/usr/bin/env python3
"""
Base calibrator class for all scale calibration methods
"""

from abc import ABC, abstractmethod

import numpy as np

from errors import QuantizationError
from models import QuantParams
from utils import CalibrationMethod, Granularity, INTEGER_BITWIDTHS


class BaseCalibrator(ABC):
    """Base class for symmetric scale calibrators"""

    method: CalibrationMethod

    def __init__(self, debug: bool = False):
        self.debug = debug

    @abstractmethod
    def slice_scale(self, values: np.ndarray, bits: int) -> float:
        """
        Scale for one slice of values (a whole tensor or one output channel)

        Args:
            values: Flat array of float values
            bits: Target bit-width (4 or 8)

        Returns:
            Positive scale s
        """
        pass

    def calibrate(self, values, bits: int,
                  granularity: Granularity = Granularity.PER_TENSOR) -> QuantParams:
        """Calibrate per tensor, or per slice along axis 0 for PER_CHANNEL"""
        if bits not in INTEGER_BITWIDTHS:
            raise QuantizationError(f"calibration bit-width must be one of {INTEGER_BITWIDTHS}, got {bits}")
        arr = np.asarray(values, dtype=np.float64)
        if granularity is Granularity.PER_CHANNEL:
            if arr.ndim < 1 or arr.shape[0] < 1:
                raise QuantizationError("per-channel calibration needs an output-channel axis")
            rows = arr.reshape(arr.shape[0], -1)
            scales = [self.slice_scale(row, bits) for row in rows]
        else:
            scales = [self.slice_scale(arr.reshape(-1), bits)]
        return QuantParams(bits=bits, scale=np.asarray(scales), granularity=granularity)
