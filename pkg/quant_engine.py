#!/usr/bin/env python3
"""
Post-training quantization: symmetric quantize/dequantize, integer convolution
with int32 accumulation, and whole-model quantization under a PrecisionConfig.
"""

import copy
import logging
import threading
from typing import Dict, Optional, Tuple, Union

import numpy as np

from calibration_manager import ACTIVATION_BITS, CalibrationManager, default_manager
from errors import ConfigError, QuantizationError, ShapeError
from model_graph import GraphExecutor
from models import LayerQuant, LayerSpec, ModelGraph, PrecisionConfig, QuantizedModel, QuantParams, Tensor
from numeric_formats import round_to_float16
from pooling import apply_head
from tensor_core import check_conv_shapes, grouped_correlate
from utils import (
    CalibrationMethod,
    DType,
    Granularity,
    INTEGER_BITWIDTHS,
    PoolingKind,
    SUPPORTED_PRECISIONS,
    qmax_for_bits,
)

logger = logging.getLogger(__name__)

INT32_MAX = 2 ** 31 - 1


def _scale_for(values: np.ndarray, params: QuantParams) -> np.ndarray:
    scale = params.scale.astype(np.float64)
    if params.granularity is Granularity.PER_TENSOR:
        return scale.reshape(())
    if values.ndim == 0 or scale.size != values.shape[0]:
        raise ShapeError(
            f"per-channel scale has {scale.size} entries for {values.shape[0] if values.ndim else 0} output channels"
        )
    return scale.reshape((-1,) + (1,) * (values.ndim - 1))


def quantize_values(w, params: QuantParams) -> np.ndarray:
    """clamp(round_half_even(w / s), -qmax, qmax) as int8"""
    if params.bits not in INTEGER_BITWIDTHS:
        raise QuantizationError(f"quantization bit-width must be one of {INTEGER_BITWIDTHS}, got {params.bits}")
    w = np.asarray(w, dtype=np.float64)
    qmax = qmax_for_bits(params.bits)
    return np.clip(np.rint(w / _scale_for(w, params)), -qmax, qmax).astype(np.int8)


def quantize_tensor(w, params: QuantParams) -> Tensor:
    """Integer tensor: i8 for 8 bits, nibble-packed i4 for 4 bits"""
    if isinstance(w, Tensor):
        w = w.values()
    dtype = DType.I8 if params.bits == 8 else DType.I4PACKED
    return Tensor.from_array(quantize_values(w, params), dtype)


def dequantize_tensor(w_int: Union[Tensor, np.ndarray], params: QuantParams) -> np.ndarray:
    """w_float = s * w_int, per output channel when the params are per-channel"""
    values = w_int.values() if isinstance(w_int, Tensor) else np.asarray(w_int)
    values = values.astype(np.float64)
    return (values * _scale_for(values, params)).astype(np.float32)


def quantize_activation(x: np.ndarray, scale: float, bits: int = ACTIVATION_BITS) -> np.ndarray:
    qmax = qmax_for_bits(bits)
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) / np.float64(np.float32(scale))),
                   -qmax, qmax).astype(np.int8)


def fake_quantize(x: np.ndarray, scale: float, bits: int = ACTIVATION_BITS) -> np.ndarray:
    s = np.float64(np.float32(scale))
    return (quantize_activation(x, scale, bits).astype(np.float64) * s).astype(np.float32)


def check_accumulator_bounds(cin_per_group: int, kh: int, kw: int, weight_bits: int,
                             act_bits: int = ACTIVATION_BITS, layer: Optional[int] = None) -> int:
    """Worst-case |acc| of one output; rejects shapes that could overflow int32"""
    bound = cin_per_group * kh * kw * qmax_for_bits(weight_bits) * qmax_for_bits(act_bits)
    if bound > INT32_MAX:
        where = f"layer {layer}: " if layer is not None else ""
        raise QuantizationError(
            f"{where}accumulator bound {bound} for Cin/groups={cin_per_group}, kernel {kh}x{kw} exceeds int32"
        )
    return bound


def qconv2d_int(x_int, s_x: float, w_int, s_w, bias=None, stride: int = 1, padding: int = 0,
                groups: int = 1, weight_bits: int = 8) -> np.ndarray:
    """Integer convolution accumulated in int32, dequantized as acc*s_x*s_w[c] + bias"""
    x = x_int.values() if isinstance(x_int, Tensor) else np.asarray(x_int)
    w = w_int.values() if isinstance(w_int, Tensor) else np.asarray(w_int)
    if not (np.issubdtype(x.dtype, np.integer) and np.issubdtype(w.dtype, np.integer)):
        raise QuantizationError("qconv2d_int expects integer activations and weights")
    bias_len = None if bias is None else int(np.asarray(bias).size)
    check_conv_shapes(x.shape, w.shape, groups, bias_len)
    check_accumulator_bounds(w.shape[1], w.shape[2], w.shape[3], weight_bits)

    acc = grouped_correlate(x.astype(np.int32), w.astype(np.int32), stride, padding, groups)
    s_w = np.asarray(s_w, dtype=np.float32).astype(np.float64).reshape(-1)
    if s_w.size not in (1, w.shape[0]):
        raise ShapeError(f"weight scale has {s_w.size} entries for Cout={w.shape[0]}")
    out = acc.astype(np.float64) * np.float64(np.float32(s_x)) * s_w.reshape(1, -1, 1, 1)
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
    return out.astype(np.float32)


def qlinear_int(x_int, s_x: float, w_int, s_w, bias=None, weight_bits: int = 8) -> np.ndarray:
    """Linear layer as a 1x1 integer convolution; x is [N, Din], w is [Dout, Din]"""
    x = np.asarray(x_int)
    w = w_int.values() if isinstance(w_int, Tensor) else np.asarray(w_int)
    out = qconv2d_int(x[:, :, None, None], s_x, w[:, :, None, None], s_w, bias, weight_bits=weight_bits)
    return out[:, :, 0, 0]


def _preceding_quantizable(model: ModelGraph, index: int) -> Optional[LayerSpec]:
    previous = [l for l in model.quantizable_layers() if l.index < index]
    return previous[-1] if previous else None


class ModelQuantizer:
    """Quantizes one fused model under many precision configs.

    Activation scales come from a single f32 pass over the calibration
    sample and are shared by every config; quantized weights are cached per
    (layer, bits). Safe to call `quantize` from several threads.
    """

    def __init__(self, model: ModelGraph, calib=None,
                 method: CalibrationMethod = CalibrationMethod.MAXABS,
                 weight_method: CalibrationMethod = CalibrationMethod.MAXABS,
                 manager: Optional[CalibrationManager] = None):
        if not model.is_fused:
            raise QuantizationError("model must be conv-BN fused before quantization")
        self.model = model
        self.calib = calib
        self.method = CalibrationMethod(method)
        self.weight_method = CalibrationMethod(weight_method)
        self.manager = manager or default_manager()
        self._act: Optional[Dict[int, QuantParams]] = None
        self._weights: Dict[Tuple[int, int], Tuple[Tensor, QuantParams]] = {}
        self._lock = threading.Lock()

    def activation_params(self) -> Dict[int, QuantParams]:
        with self._lock:
            if self._act is None:
                if self.calib is None or len(self.calib) == 0:
                    raise QuantizationError("calibration sample is empty but the config has integer layers")
                self._act = self.manager.activation_params(self.model, self.calib, self.method)
            return self._act

    def quantized_weight(self, layer: LayerSpec, bits: int) -> Tuple[Tensor, QuantParams]:
        key = (layer.index, bits)
        with self._lock:
            cached = self._weights.get(key)
        if cached is not None:
            return cached
        w = self.model.weight(layer, 'weight')
        params = self.manager.weight_params(w, bits, self.weight_method)
        result = (quantize_tensor(w, params), params)
        with self._lock:
            self._weights[key] = result
        return result

    def quantize(self, config: PrecisionConfig) -> QuantizedModel:
        model = self.model
        layers = model.quantizable_layers()
        if len(config) != len(layers):
            raise QuantizationError(
                f"precision config has {len(config)} entries, model has {len(layers)} quantizable layers"
            )
        bad = [b for b in config.bits if b not in SUPPORTED_PRECISIONS]
        if bad:
            raise ConfigError(f"unsupported precisions {bad}; allowed {SUPPORTED_PRECISIONS}")

        act = self.activation_params() if any(b in INTEGER_BITWIDTHS for b in config.bits) else {}
        weights = dict(model.weights)
        layer_quant: Dict[int, LayerQuant] = {}
        precision_of: Dict[int, int] = {}

        for layer, bits in zip(layers, config.bits):
            precision_of[layer.index] = bits
            w_key, b_key = layer.params['weight'], layer.params.get('bias')
            if bits == 16:
                weights[w_key] = Tensor.from_array(model.weight(layer, 'weight'), DType.F16)
                if b_key is not None:
                    weights[b_key] = Tensor.from_array(model.weight(layer, 'bias'), DType.F16)
                layer_quant[layer.index] = LayerQuant(precision=16)
                continue
            w_shape = model.weights[w_key].shape
            kh, kw = (w_shape[2], w_shape[3]) if len(w_shape) == 4 else (1, 1)
            check_accumulator_bounds(w_shape[1], kh, kw, bits, layer=layer.index)
            w_int, params = self.quantized_weight(layer, bits)
            weights[w_key] = w_int
            layer_quant[layer.index] = LayerQuant(
                precision=bits, weight_params=params, act_scale=float(act[layer.index].scale[0]))

        head = model.head()
        previous = _preceding_quantizable(model, head.index)
        if head.pooling in (PoolingKind.GEM, PoolingKind.NETVLAD) and previous is not None \
                and precision_of[previous.index] in INTEGER_BITWIDTHS:
            layer_quant[head.index] = LayerQuant(precision=ACTIVATION_BITS,
                                                 act_scale=float(act[head.index].scale[0]))

        graph = ModelGraph(
            layers=copy.deepcopy(model.layers),
            weights=weights,
            descriptor_dim=model.descriptor_dim,
            arch=model.arch,
            input_shape=model.input_shape,
            metadata=dict(model.metadata, quantized=True),
        )
        logger.debug("Quantized %s under [%s] (mean %.2f bits)", model.arch, config, config.mean_bits)
        return QuantizedModel(graph=graph, layer_quant=layer_quant, config=config, method=self.method.value)


def quantize_model(model: ModelGraph, config: PrecisionConfig, calib=None,
                   method: CalibrationMethod = CalibrationMethod.MAXABS,
                   weight_method: CalibrationMethod = CalibrationMethod.MAXABS) -> QuantizedModel:
    return ModelQuantizer(model, calib, method, weight_method).quantize(config)


class QuantizedExecutor(GraphExecutor):
    """Runs a QuantizedModel: integer kernels at 4/8 bits, f16 emulation at 16"""

    def __init__(self, qmodel: QuantizedModel):
        super().__init__(qmodel.graph)
        self.layer_quant = qmodel.layer_quant

    def conv(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        lq = self.layer_quant.get(layer.index)
        if lq is None:
            return super().conv(layer, x)
        a = layer.attrs
        if lq.precision == 16:
            return round_to_float16(super().conv(layer, round_to_float16(x)))
        return qconv2d_int(quantize_activation(x, lq.act_scale), lq.act_scale,
                           self.model.weight(layer, 'weight'), lq.weight_params.scale,
                           self.model.weight(layer, 'bias'), a['stride'], a['padding'], a['groups'],
                           weight_bits=lq.precision)

    def linear(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        lq = self.layer_quant.get(layer.index)
        if lq is None:
            return super().linear(layer, x)
        if lq.precision == 16:
            return round_to_float16(super().linear(layer, round_to_float16(x)))
        return qlinear_int(quantize_activation(x, lq.act_scale), lq.act_scale,
                           self.model.weight(layer, 'weight'), lq.weight_params.scale,
                           self.model.weight(layer, 'bias'), weight_bits=lq.precision)

    def head(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        lq = self.layer_quant.get(layer.index)
        if lq is not None:
            x = fake_quantize(x, lq.act_scale, lq.precision)
        return apply_head(layer.pooling, x, p=self.model.weight(layer, 'p'),
                          codes=self.model.weight(layer, 'codes'))


def forward_quantized(qmodel: QuantizedModel, batch, normalize: bool = True) -> np.ndarray:
    """Descriptors [N, D] of a quantized model; rows L2-normalized"""
    return QuantizedExecutor(qmodel).run(batch, normalize=normalize)


def forward(model: Union[ModelGraph, QuantizedModel], batch, normalize: bool = True) -> np.ndarray:
    if isinstance(model, QuantizedModel):
        return forward_quantized(model, batch, normalize)
    return GraphExecutor(model).run(batch, normalize=normalize)


def quantization_sqnr(reference: np.ndarray, approx: np.ndarray) -> float:
    """10*log10(|ref|^2 / |ref - approx|^2) in dB"""
    ref = np.asarray(reference, dtype=np.float64)
    noise = np.sum((ref - np.asarray(approx, dtype=np.float64)) ** 2)
    if noise == 0:
        return float('inf')
    return float(10.0 * np.log10(np.sum(ref ** 2) / noise))
