#!/usr/bin/env python3
"""
Common utilities for the qvpr toolkit
"""

from enum import Enum
from typing import Tuple

import numpy as np

# For colored output
try:
    from colorama import init as colorama_init, Fore, Style
    colorama_init(autoreset=True)
    COLORS_AVAILABLE = True
except ImportError:
    COLORS_AVAILABLE = False
    # Dummy color constants if colorama not available
    class Fore:
        RED = GREEN = YELLOW = BLUE = MAGENTA = CYAN = WHITE = RESET = ''
    class Style:
        BRIGHT = DIM = NORMAL = RESET_ALL = ''


class DType(Enum):
    """Element types of a Tensor; values are the on-disk dtype codes"""
    F32 = 0
    F16 = 1
    I8 = 2
    I4PACKED = 3
    I32 = 4


class LayerKind(Enum):
    """Layer kinds of a ModelGraph"""
    CONV = "conv"
    DEPTHWISE_CONV = "dwconv"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    RELU6 = "relu6"
    RESIDUAL_ADD = "residual_add"
    LINEAR = "linear"
    POOLING_HEAD = "pooling_head"


QUANTIZABLE_KINDS = (LayerKind.CONV, LayerKind.DEPTHWISE_CONV, LayerKind.LINEAR)


class PoolingKind(Enum):
    """Global pooling heads"""
    SPOC = "spoc"
    MAC = "mac"
    GEM = "gem"
    NETVLAD = "netvlad"


class Granularity(Enum):
    """Scale granularity of a quantizer"""
    PER_CHANNEL = "per_channel"
    PER_TENSOR = "per_tensor"


class CalibrationMethod(Enum):
    """Available scale calibration methods"""
    MAXABS = "maxabs"
    KL = "kl"


SUPPORTED_PRECISIONS = (4, 8, 16)
INTEGER_BITWIDTHS = (4, 8)


def qmax_for_bits(bits: int) -> int:
    """Largest magnitude of the symmetric signed range for `bits`"""
    return 2 ** (bits - 1) - 1


def round_half_even(values: np.ndarray) -> np.ndarray:
    """Round to nearest, ties to even (np.rint semantics)"""
    return np.rint(values)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize the last axis; zero rows stay zero"""
    x64 = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x64, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return (x64 / safe).astype(np.float32)


def parse_shape(text: str) -> Tuple[int, ...]:
    """Parse '3x32x32' (or '3,32,32') into a shape tuple"""
    parts = [p for p in text.replace(',', 'x').lower().split('x') if p.strip()]
    if not parts:
        raise ValueError(f"Empty shape string: {text!r}")
    shape = tuple(int(p) for p in parts)
    if any(d <= 0 for d in shape):
        raise ValueError(f"Shape extents must be positive: {text!r}")
    return shape


def parse_int_list(text: str) -> Tuple[int, ...]:
    """Parse a comma-separated list of integers"""
    return tuple(int(p) for p in text.split(',') if p.strip())


def format_shape(shape) -> str:
    return 'x'.join(str(int(d)) for d in shape)
