"""Scale calibration methods"""

from calibrators.base_calibrator import BaseCalibrator
from calibrators.kl_calibrator import KLCalibrator, calibrate_kl, kl_threshold
from calibrators.maxabs_calibrator import MaxAbsCalibrator, calibrate_maxabs

__all__ = [
    'BaseCalibrator',
    'KLCalibrator',
    'MaxAbsCalibrator',
    'calibrate_kl',
    'calibrate_maxabs',
    'kl_threshold',
]
