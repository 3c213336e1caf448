#!/usr/bin/env python3
"""
Data models for the qvpr toolkit
"""

from dataclasses import dataclass, field
from typing import List, Dict, Any, Optional, Tuple

import numpy as np

from numeric_formats import (
    float16_bits_to_float32,
    float32_to_float16_bits,
    int4_row_bytes,
    pack_int4,
    unpack_int4,
)
from utils import (
    DType,
    Granularity,
    LayerKind,
    PoolingKind,
    QUANTIZABLE_KINDS,
)


@dataclass
class ArchConfig:
    """Miniature backbone description consumed by build_backbone"""
    family: str = "mini-mobilenet"
    width: float = 1.0
    depth: int = 2
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    descriptor_dim: int = 64
    pooling: PoolingKind = PoolingKind.GEM
    seed: int = 0
    bias: bool = True
    projection: bool = True
    expansion: int = 4
    gem_p: float = 3.0
    clusters: int = 8


@dataclass(frozen=True)
class DTypeInfo:
    """Static description of an element type"""
    dtype: DType
    bits: int
    min_value: float
    max_value: float
    is_float: bool
    exponent_bits: int = 0
    mantissa_bits: int = 0


DTYPE_INFO: Dict[DType, DTypeInfo] = {
    DType.F32: DTypeInfo(DType.F32, 32, -3.4028234663852886e38, 3.4028234663852886e38, True, 8, 23),
    DType.F16: DTypeInfo(DType.F16, 16, -65504.0, 65504.0, True, 5, 10),
    DType.I8: DTypeInfo(DType.I8, 8, -127, 127, False),
    DType.I4PACKED: DTypeInfo(DType.I4PACKED, 4, -7, 7, False),
    DType.I32: DTypeInfo(DType.I32, 32, -2 ** 31, 2 ** 31 - 1, False),
}

_STORAGE = {
    DType.F32: np.float32,
    DType.F16: np.uint16,  # raw binary16 bit patterns
    DType.I8: np.int8,
    DType.I4PACKED: np.uint8,
    DType.I32: np.int32,
}


@dataclass(frozen=True)
class Tensor:
    """Immutable n-d array with an explicit element type.

    `data` holds the storage representation: f16 as uint16 bit patterns,
    i4packed as bytes with two nibbles each (low nibble first, rows padded).
    """
    shape: Tuple[int, ...]
    dtype: DType
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'shape', tuple(int(d) for d in self.shape))
        data = np.ascontiguousarray(self.data, dtype=_STORAGE[self.dtype])
        data.flags.writeable = False
        object.__setattr__(self, 'data', data)
        if data.shape != self.storage_shape():
            raise ValueError(
                f"{self.dtype.name} tensor of shape {self.shape} needs storage "
                f"{self.storage_shape()}, got {data.shape}"
            )

    @classmethod
    def from_array(cls, values, dtype: DType = DType.F32) -> "Tensor":
        """Encode logical values into a tensor of the given dtype"""
        arr = np.asarray(values)
        if dtype is DType.F32:
            data = arr.astype(np.float32)
        elif dtype is DType.F16:
            data = float32_to_float16_bits(arr.astype(np.float32))
        elif dtype is DType.I8:
            if arr.size and (arr.min() < -127 or arr.max() > 127):
                raise ValueError("i8 tensors hold values in [-127, 127]")
            data = arr.astype(np.int8)
        elif dtype is DType.I4PACKED:
            if arr.size and (arr.min() < -7 or arr.max() > 7):
                raise ValueError("i4 tensors hold values in [-7, 7]")
            data = pack_int4(arr.astype(np.int8)) if arr.ndim else pack_int4(arr.reshape(1))
        else:
            data = arr.astype(np.int32)
        shape = arr.shape if arr.ndim else (1,)
        if dtype is not DType.I4PACKED:
            data = data.reshape(shape)
        return cls(shape=shape, dtype=dtype, data=data)

    def storage_shape(self) -> Tuple[int, ...]:
        if self.dtype is DType.I4PACKED:
            return self.shape[:-1] + (int4_row_bytes(self.shape[-1]),)
        return self.shape

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    def values(self) -> np.ndarray:
        """Logical values: f32/f16 widened to float32, integers as int8/int32"""
        if self.dtype is DType.F16:
            return float16_bits_to_float32(self.data)
        if self.dtype is DType.I4PACKED:
            return unpack_int4(self.data, self.shape[-1])
        return np.array(self.data)


@dataclass
class LayerSpec:
    """One node of a ModelGraph.

    `attrs` carries shape attributes (channels, kernel, stride, padding,
    groups, source, pooling parameters); `params` maps a role (weight, bias,
    gamma, beta, mean, var, p, codes) to a key in the weight store.
    """
    index: int
    kind: LayerKind
    attrs: Dict[str, Any] = field(default_factory=dict)
    params: Dict[str, str] = field(default_factory=dict)

    @property
    def is_quantizable(self) -> bool:
        return self.kind in QUANTIZABLE_KINDS

    @property
    def pooling(self) -> Optional[PoolingKind]:
        if self.kind is LayerKind.POOLING_HEAD:
            return PoolingKind(self.attrs['pooling'])
        return None


@dataclass
class ModelGraph:
    """Ordered layer list plus named weight store"""
    layers: List[LayerSpec]
    weights: Dict[str, Tensor]
    descriptor_dim: int
    arch: str
    input_shape: Tuple[int, int, int]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def quantizable_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.is_quantizable]

    def weight(self, layer: LayerSpec, role: str) -> Optional[np.ndarray]:
        key = layer.params.get(role)
        if key is None:
            return None
        return self.weights[key].values()

    def parameter_count(self) -> int:
        return sum(t.size for t in self.weights.values())

    def head(self) -> LayerSpec:
        return next(l for l in self.layers if l.kind is LayerKind.POOLING_HEAD)

    @property
    def is_fused(self) -> bool:
        return all(layer.kind is not LayerKind.BATCHNORM for layer in self.layers)


@dataclass
class QuantParams:
    """Symmetric linear quantizer: bit-width, scale(s) and granularity"""
    bits: int
    scale: np.ndarray
    granularity: Granularity

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float32))
        if np.any(~np.isfinite(self.scale)) or np.any(self.scale <= 0):
            raise ValueError("Quantization scales must be finite and > 0")
        if self.granularity is Granularity.PER_TENSOR and self.scale.size != 1:
            raise ValueError("Per-tensor quantization takes a single scale")


@dataclass
class LayerQuant:
    """Quantization record of one layer in a QuantizedModel"""
    precision: int
    weight_params: Optional[QuantParams] = None
    act_scale: Optional[float] = None


@dataclass
class PrecisionConfig:
    """Per-layer precision vector I over the quantizable layers"""
    bits: Tuple[int, ...]

    def __post_init__(self):
        self.bits = tuple(int(b) for b in self.bits)

    def __len__(self):
        return len(self.bits)

    @property
    def mean_bits(self) -> float:
        return float(np.mean(self.bits)) if self.bits else 0.0

    def is_feasible(self, budget: float) -> bool:
        return self.mean_bits <= budget

    def __str__(self):
        return ",".join(str(b) for b in self.bits)


@dataclass
class QuantizedModel:
    """Fused graph with integer/f16 weights and per-layer quantization records"""
    graph: ModelGraph
    layer_quant: Dict[int, LayerQuant]
    config: PrecisionConfig
    method: str = "maxabs"

    @property
    def descriptor_dim(self) -> int:
        return self.graph.descriptor_dim

    @property
    def input_shape(self):
        return self.graph.input_shape


@dataclass
class SearchConfig:
    """Genetic search inputs: N, p_m, C, B, G, seed and fitness sample size L"""
    population: int = 16
    mutation_rate: float = 0.5
    tournament: int = 4
    budget: float = 10.0
    generations: int = 300
    seed: int = 0
    fitness_samples: int = 8
    threads: int = 1


@dataclass
class SensitivityProfile:
    """Per-layer descriptor perturbation when that layer alone drops to 4 bits"""
    scores: np.ndarray


@dataclass
class SearchResult:
    best: PrecisionConfig
    best_fitness: float
    trace: List[float]
    evaluated: List[PrecisionConfig] = field(default_factory=list)
    population: List[PrecisionConfig] = field(default_factory=list)


@dataclass
class PlaceDataset:
    """Synthetic place-recognition set: one reference per place, perturbed queries"""
    references: np.ndarray
    queries: np.ndarray
    ground_truth: np.ndarray
    seed: int
    noise: float = 0.0
    brightness: float = 0.0
    translation: int = 0

    @property
    def num_places(self) -> int:
        return int(self.references.shape[0])


@dataclass
class DescriptorDB:
    """Matrix of L2-normalized descriptors with their place ids"""
    descriptors: np.ndarray
    place_ids: np.ndarray

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        self.place_ids = np.asarray(self.place_ids, dtype=np.int32)
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] < 1:
            raise ValueError("DescriptorDB needs a non-empty [N, D] matrix")
        if self.place_ids.shape != (self.descriptors.shape[0],):
            raise ValueError("DescriptorDB needs one place id per row")

    @property
    def size(self) -> int:
        return int(self.descriptors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.descriptors.shape[1])

    @property
    def memory_bytes(self) -> int:
        return self.size * self.dim * 4


@dataclass
class TripletSample:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    margin: float = 0.1


@dataclass
class LatencySample:
    n: int
    dim: int
    tau_e: float
    tau_r: float
    precision: str = "f32"
    repetitions: int = 0

    @property
    def tau_total(self) -> float:
        return self.tau_e + self.tau_r


@dataclass
class LatencyModel:
    """tau_r ~= k1*D + k2*N, plus the encode latency tau_e"""
    k1: float
    k2: float
    tau_e: float = 0.0
    n_range: Tuple[int, int] = (0, 0)
    d_range: Tuple[int, int] = (0, 0)

    def predict_retrieval(self, dim: float, n: float) -> float:
        return self.k1 * dim + self.k2 * n

    def predict_total(self, dim: float, n: float) -> float:
        return self.tau_e + self.predict_retrieval(dim, n)


@dataclass
class PlanResult:
    feasible: bool
    dimension: Optional[int]
    raw_dimension: float
    slack: float
    reason: str = ""


@dataclass
class MemoryBudget:
    memory_bytes: int
    n: int
    dim: int


@dataclass
class MemoryCheck:
    passed: bool
    required_bytes: int
    memory_bytes: int


@dataclass
class ThresholdSweep:
    """Outcome of an entropy calibration sweep over histogram clip points"""
    threshold: float
    bin_index: int
    bin_width: float
    divergences: np.ndarray


@dataclass
class DesignPoint:
    """One backbone x pooling x precision cell of a design sweep"""
    family: str
    pooling: str
    precision: str
    recall_at_1: float
    file_bytes: int
    tau_e: float


@dataclass
class BudgetPoint:
    """Best searched configuration under one average bit-width budget"""
    budget: float
    config: PrecisionConfig
    fitness: float
    recall_at_1: float
    file_bytes: int
    tau_e: float
