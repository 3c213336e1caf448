#!/usr/bin/env python3
"""
Max-abs calibrator: s = max|w| / (2^(b-1) - 1)
"""

import numpy as np

from calibrators.base_calibrator import BaseCalibrator
from models import QuantParams
from utils import CalibrationMethod, Granularity, qmax_for_bits

ZERO_SCALE = 1.0


class MaxAbsCalibrator(BaseCalibrator):
    """Scale from the largest magnitude; an all-zero slice gets s = 1"""

    method = CalibrationMethod.MAXABS

    def slice_scale(self, values: np.ndarray, bits: int) -> float:
        if values.size == 0:
            return ZERO_SCALE
        peak = float(np.max(np.abs(values)))
        if peak == 0.0:
            return ZERO_SCALE
        return peak / qmax_for_bits(bits)


def calibrate_maxabs(w, bits: int, granularity: Granularity = Granularity.PER_CHANNEL) -> QuantParams:
    return MaxAbsCalibrator().calibrate(w, bits, granularity)
