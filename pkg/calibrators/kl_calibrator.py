#!/usr/bin/env python3
"""
Entropy (KL divergence) calibrator.

A magnitude histogram of the values is clipped at each candidate bin i
(outliers folded into the last kept bin), squeezed onto qmax levels,
expanded back over its nonzero bins and compared with the clipped
reference. The clip point with the smallest divergence sets the scale.
"""

import logging
from typing import Optional

import numpy as np
from scipy.stats import entropy

from calibrators.base_calibrator import BaseCalibrator
from calibrators.maxabs_calibrator import ZERO_SCALE
from errors import CalibrationError
from models import QuantParams, ThresholdSweep
from utils import CalibrationMethod, Granularity, qmax_for_bits

logger = logging.getLogger(__name__)

NUM_BINS = 2048
START_BIN = 128


def quantize_distribution(p: np.ndarray, levels: int) -> np.ndarray:
    """Merge p into `levels` contiguous groups, spread each group's mass over its nonzero bins"""
    width = max(p.size // levels, 1)
    group = np.minimum(np.arange(p.size) // width, levels - 1)
    nonzero = p > 0
    mass = np.bincount(group, weights=p, minlength=levels)
    support = np.bincount(group, weights=nonzero.astype(np.float64), minlength=levels)
    return np.where(nonzero, mass[group] / np.maximum(support[group], 1.0), 0.0)


def kl_threshold(values, bits: int, num_bins: int = NUM_BINS,
                 start_bin: int = START_BIN) -> Optional[ThresholdSweep]:
    """Sweep clip points start_bin..num_bins; None when every value is zero"""
    mags = np.abs(np.asarray(values, dtype=np.float64).reshape(-1))
    if mags.size == 0:
        raise CalibrationError("KL calibration needs at least one value")
    peak = float(mags.max())
    if peak == 0.0:
        return None
    if not 1 <= start_bin <= num_bins:
        raise CalibrationError(f"start bin {start_bin} outside 1..{num_bins}")

    hist, _ = np.histogram(mags, bins=num_bins, range=(0.0, peak))
    hist = hist.astype(np.float64)
    tail = np.concatenate([np.cumsum(hist[::-1])[::-1], [0.0]])
    levels = qmax_for_bits(bits)

    divergences = np.empty(num_bins - start_bin + 1)
    best_index, best_kl = num_bins, np.inf
    for i in range(start_bin, num_bins + 1):
        p = hist[:i].copy()
        p[i - 1] += tail[i]
        q = quantize_distribution(p, levels)
        kl = float(entropy(p, q))
        divergences[i - start_bin] = kl
        # ascending sweep with <= keeps the larger threshold on ties
        if kl <= best_kl:
            best_index, best_kl = i, kl

    bin_width = peak / num_bins
    logger.debug("KL sweep: peak %.6g, best bin %d (KL %.6g)", peak, best_index, best_kl)
    return ThresholdSweep(threshold=best_index * bin_width, bin_index=best_index,
                          bin_width=bin_width, divergences=divergences)


class KLCalibrator(BaseCalibrator):
    """Clip threshold minimizing KL(reference || quantized) over the histogram"""

    method = CalibrationMethod.KL

    def __init__(self, num_bins: int = NUM_BINS, start_bin: int = START_BIN, debug: bool = False):
        super().__init__(debug)
        self.num_bins = num_bins
        self.start_bin = start_bin

    def slice_scale(self, values: np.ndarray, bits: int) -> float:
        sweep = kl_threshold(values, bits, self.num_bins, self.start_bin)
        if sweep is None:
            return ZERO_SCALE
        return sweep.threshold / qmax_for_bits(bits)


def calibrate_kl(values, bits: int, granularity: Granularity = Granularity.PER_TENSOR) -> QuantParams:
    return KLCalibrator().calibrate(values, bits, granularity)
