#!/usr/bin/env python3
"""
Layer graphs: miniature backbone construction, f32 execution and conv-BN fusion
"""

import copy
import logging
from typing import Dict, List, Set

import numpy as np

from config_loader import ArchConfigLoader
from errors import ConfigError, ShapeError
from models import ArchConfig, LayerSpec, ModelGraph, Tensor
from pooling import apply_head, pooled_dim
from tensor_core import batchnorm_f32, conv2d_f32
from utils import LayerKind, PoolingKind, l2_normalize_rows

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
MAX_PARAMETERS = 5_000_000
BASE_CHANNELS = {'mini-mobilenet': 16, 'mini-resnet': 32, 'mini-vgg': 16}


class _GraphBuilder:
    """Appends layers and seeded weights in a fixed order"""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.layers: List[LayerSpec] = []
        self.weights: Dict[str, Tensor] = {}

    @property
    def last(self) -> int:
        return len(self.layers) - 1

    def _add(self, kind: LayerKind, attrs=None, params=None) -> int:
        index = len(self.layers)
        self.layers.append(LayerSpec(index, kind, dict(attrs or {}), dict(params or {})))
        return index

    def _uniform(self, shape, fan_in: int) -> np.ndarray:
        k = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-k, k, size=shape).astype(np.float32)

    def conv(self, cin: int, cout: int, kernel: int, stride: int = 1, groups: int = 1,
             bias: bool = True) -> int:
        index = len(self.layers)
        fan_in = (cin // groups) * kernel * kernel
        params = {'weight': f"layer{index}.weight"}
        self.weights[params['weight']] = Tensor.from_array(
            self._uniform((cout, cin // groups, kernel, kernel), fan_in))
        if bias:
            params['bias'] = f"layer{index}.bias"
            self.weights[params['bias']] = Tensor.from_array(self._uniform((cout,), fan_in))
        kind = LayerKind.DEPTHWISE_CONV if groups > 1 and groups == cin == cout else LayerKind.CONV
        attrs = {
            'in_channels': cin, 'out_channels': cout, 'kernel': kernel,
            'stride': stride, 'padding': kernel // 2, 'groups': groups,
        }
        return self._add(kind, attrs, params)

    def batchnorm(self, channels: int) -> int:
        index = len(self.layers)
        stats = {
            'gamma': self.rng.uniform(0.5, 1.5, channels),
            'beta': self.rng.uniform(-0.1, 0.1, channels),
            'mean': self.rng.uniform(-0.1, 0.1, channels),
            'var': self.rng.uniform(0.5, 1.5, channels),
        }
        params = {}
        for role, values in stats.items():
            params[role] = f"layer{index}.{role}"
            self.weights[params[role]] = Tensor.from_array(values.astype(np.float32))
        return self._add(LayerKind.BATCHNORM, {'channels': channels, 'eps': BN_EPS}, params)

    def activation(self, kind: LayerKind) -> int:
        return self._add(kind)

    def residual(self, source: int) -> int:
        return self._add(LayerKind.RESIDUAL_ADD, {'source': source})

    def head(self, cfg: ArchConfig, channels: int) -> int:
        index = len(self.layers)
        attrs = {'pooling': cfg.pooling.value, 'channels': channels}
        params = {}
        if cfg.pooling is PoolingKind.GEM:
            params['p'] = f"layer{index}.p"
            self.weights[params['p']] = Tensor.from_array(np.full(channels, cfg.gem_p, np.float32))
        elif cfg.pooling is PoolingKind.NETVLAD:
            attrs['clusters'] = cfg.clusters
            params['codes'] = f"layer{index}.codes"
            codes = self.rng.standard_normal((cfg.clusters, channels)) / np.sqrt(channels)
            self.weights[params['codes']] = Tensor.from_array(codes.astype(np.float32))
        return self._add(LayerKind.POOLING_HEAD, attrs, params)

    def linear(self, din: int, dout: int, bias: bool = True) -> int:
        index = len(self.layers)
        params = {'weight': f"layer{index}.weight"}
        self.weights[params['weight']] = Tensor.from_array(self._uniform((dout, din), din))
        if bias:
            params['bias'] = f"layer{index}.bias"
            self.weights[params['bias']] = Tensor.from_array(self._uniform((dout,), din))
        return self._add(LayerKind.LINEAR, {'in_features': din, 'out_features': dout}, params)


def _mini_vgg(b: _GraphBuilder, cfg: ArchConfig, c0: int) -> int:
    channels = cfg.input_shape[0]
    for i in range(cfg.depth):
        cout = c0 * 2 ** min(i, 3)
        b.conv(channels, cout, 3, stride=1 if i == 0 else 2, bias=cfg.bias)
        b.activation(LayerKind.RELU)
        channels = cout
    return channels


def _mini_resnet(b: _GraphBuilder, cfg: ArchConfig, c0: int) -> int:
    b.conv(cfg.input_shape[0], c0, 3, stride=2, bias=False)
    b.batchnorm(c0)
    block_input = b.activation(LayerKind.RELU)
    for _ in range(cfg.depth):
        b.conv(c0, c0, 3, bias=False)
        b.batchnorm(c0)
        b.activation(LayerKind.RELU)
        b.conv(c0, c0, 3, bias=False)
        b.batchnorm(c0)
        b.residual(block_input)
        block_input = b.activation(LayerKind.RELU)
    return c0


def _mini_mobilenet(b: _GraphBuilder, cfg: ArchConfig, c0: int) -> int:
    b.conv(cfg.input_shape[0], c0, 3, stride=2, bias=False)
    b.batchnorm(c0)
    block_input = b.activation(LayerKind.RELU6)
    channels = c0
    for i in range(cfg.depth):
        stride = 2 if i % 2 else 1
        cout = channels * 2 if stride == 2 else channels
        hidden = channels * cfg.expansion
        # inverted bottleneck: 1x1 expand -> 3x3 depthwise -> 1x1 linear project
        b.conv(channels, hidden, 1, bias=False)
        b.batchnorm(hidden)
        b.activation(LayerKind.RELU6)
        b.conv(hidden, hidden, 3, stride=stride, groups=hidden, bias=False)
        b.batchnorm(hidden)
        b.activation(LayerKind.RELU6)
        b.conv(hidden, cout, 1, bias=False)
        block_input_next = b.batchnorm(cout)
        if stride == 1 and cout == channels:
            block_input_next = b.residual(block_input)
        block_input = block_input_next
        channels = cout
    last = channels * 2
    b.conv(channels, last, 1, bias=False)
    b.batchnorm(last)
    b.activation(LayerKind.RELU6)
    return last


_FAMILY_BUILDERS = {
    'mini-vgg': _mini_vgg,
    'mini-resnet': _mini_resnet,
    'mini-mobilenet': _mini_mobilenet,
}


def build_backbone(cfg: ArchConfig) -> ModelGraph:
    """Build a seeded miniature backbone with pooling head and projection"""
    ArchConfigLoader.validate(cfg)
    builder_fn = _FAMILY_BUILDERS.get(cfg.family)
    if builder_fn is None:
        raise ConfigError(f"unknown family '{cfg.family}'")

    c0 = max(1, int(round(BASE_CHANNELS[cfg.family] * cfg.width)))
    b = _GraphBuilder(cfg.seed)
    channels = builder_fn(b, cfg, c0)
    b.head(cfg, channels)

    pooled = pooled_dim(cfg.pooling, channels, cfg.clusters)
    if cfg.projection:
        b.linear(pooled, cfg.descriptor_dim, bias=cfg.bias)
    elif pooled != cfg.descriptor_dim:
        raise ConfigError(
            f"descriptor dim {cfg.descriptor_dim} incompatible with {cfg.pooling.value} head "
            f"output {pooled} when projection is disabled"
        )

    model = ModelGraph(
        layers=b.layers,
        weights=b.weights,
        descriptor_dim=cfg.descriptor_dim,
        arch=cfg.family,
        input_shape=tuple(cfg.input_shape),
        metadata={'width': cfg.width, 'depth': cfg.depth, 'seed': cfg.seed,
                  'pooling': cfg.pooling.value},
    )
    if model.parameter_count() > MAX_PARAMETERS:
        raise ConfigError(
            f"{cfg.family} with width {cfg.width} and depth {cfg.depth} has "
            f"{model.parameter_count()} parameters (limit {MAX_PARAMETERS})"
        )
    validate_graph(model)
    logger.info("Built %s: %d layers, %d parameters", cfg.family, len(model.layers),
                model.parameter_count())
    return model


def residual_sources(model: ModelGraph) -> Set[int]:
    return {l.attrs['source'] for l in model.layers if l.kind is LayerKind.RESIDUAL_ADD}


def validate_graph(model: ModelGraph) -> None:
    """Check indices, residual ordering, the single pooling head and weight handles"""
    heads = [l for l in model.layers if l.kind is LayerKind.POOLING_HEAD]
    if len(heads) != 1:
        raise ConfigError(f"graph must contain exactly one pooling head, found {len(heads)}")
    head_index = heads[0].index
    for position, layer in enumerate(model.layers):
        if layer.index != position:
            raise ConfigError(f"layer at position {position} carries index {layer.index}")
        if layer.kind is LayerKind.RESIDUAL_ADD and not 0 <= layer.attrs['source'] < layer.index:
            raise ConfigError(f"residual at {layer.index} references non-preceding layer {layer.attrs['source']}")
        if layer.kind in (LayerKind.CONV, LayerKind.DEPTHWISE_CONV, LayerKind.BATCHNORM) \
                and layer.index > head_index:
            raise ConfigError(f"convolutional layer {layer.index} follows the pooling head")
        if layer.kind is LayerKind.LINEAR and layer.index < head_index:
            raise ConfigError(f"linear layer {layer.index} precedes the pooling head")
        for role, key in layer.params.items():
            if key not in model.weights:
                raise ConfigError(f"layer {layer.index} {role} handle '{key}' does not resolve")


def check_batch(model: ModelGraph, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"batch shape {x.shape} does not match model input [N, {', '.join(map(str, model.input_shape))}]"
        )
    return x


class GraphExecutor:
    """Runs a ModelGraph layer by layer in f32.

    Subclasses override `conv`, `linear`, `head` or `observe` to swap in
    quantized kernels or record activations.
    """

    def __init__(self, model: ModelGraph):
        self.model = model
        self._keep = residual_sources(model)

    def run(self, batch, normalize: bool = True) -> np.ndarray:
        x = check_batch(self.model, batch)
        saved: Dict[int, np.ndarray] = {}
        for layer in self.model.layers:
            x = self.run_layer(layer, x, saved)
            if layer.index in self._keep:
                saved[layer.index] = x
        if x.ndim != 2 or x.shape[1] != self.model.descriptor_dim:
            raise ShapeError(f"graph output {x.shape} does not match descriptor dim {self.model.descriptor_dim}")
        return l2_normalize_rows(x) if normalize else x

    def run_layer(self, layer: LayerSpec, x: np.ndarray, saved: Dict[int, np.ndarray]) -> np.ndarray:
        kind = layer.kind
        if kind in (LayerKind.CONV, LayerKind.DEPTHWISE_CONV):
            self.observe(layer, x)
            return self.conv(layer, x)
        if kind is LayerKind.LINEAR:
            self.observe(layer, x)
            return self.linear(layer, x)
        if kind is LayerKind.BATCHNORM:
            m = self.model
            return batchnorm_f32(x, m.weight(layer, 'mean'), m.weight(layer, 'var'),
                                 m.weight(layer, 'gamma'), m.weight(layer, 'beta'),
                                 layer.attrs.get('eps', BN_EPS))
        if kind is LayerKind.RELU:
            return np.maximum(x, 0.0)
        if kind is LayerKind.RELU6:
            return np.clip(x, 0.0, 6.0)
        if kind is LayerKind.RESIDUAL_ADD:
            other = saved[layer.attrs['source']]
            if other.shape != x.shape:
                raise ShapeError(f"residual at {layer.index}: {x.shape} vs source {other.shape}")
            return (x + other).astype(np.float32)
        if kind is LayerKind.POOLING_HEAD:
            self.observe(layer, x)
            return self.head(layer, x)
        raise ConfigError(f"unsupported layer kind {kind}")

    def observe(self, layer: LayerSpec, x: np.ndarray) -> None:
        pass

    def conv(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        a = layer.attrs
        return conv2d_f32(x, self.model.weight(layer, 'weight'), self.model.weight(layer, 'bias'),
                          a['stride'], a['padding'], a['groups'])

    def linear(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        w = self.model.weight(layer, 'weight').astype(np.float64)
        out = x.astype(np.float64) @ w.T
        bias = self.model.weight(layer, 'bias')
        if bias is not None:
            out = out + bias
        return out.astype(np.float32)

    def head(self, layer: LayerSpec, x: np.ndarray) -> np.ndarray:
        return apply_head(layer.pooling, x, p=self.model.weight(layer, 'p'),
                          codes=self.model.weight(layer, 'codes'))


def forward_f32(model: ModelGraph, batch, normalize: bool = True) -> np.ndarray:
    """Descriptors [N, D] of an f32 model; rows L2-normalized"""
    return GraphExecutor(model).run(batch, normalize=normalize)


def fuse_conv_bn(model: ModelGraph) -> ModelGraph:
    """Fold every BatchNorm into the convolution right before it.

    W' = (lambda / sqrt(var + eps)) * W per output channel and
    b' = beta + (lambda / sqrt(var + eps)) * (b - mean). Returns a new graph.
    """
    layers = model.layers
    referenced = residual_sources(model)
    weights = dict(model.weights)
    new_layers: List[LayerSpec] = []
    index_map: Dict[int, int] = {}

    i = 0
    while i < len(layers):
        layer = layers[i]
        new_index = len(new_layers)
        if layer.kind is LayerKind.BATCHNORM:
            raise ConfigError(f"BatchNorm at index {layer.index} does not follow a convolution")

        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if layer.kind in (LayerKind.CONV, LayerKind.DEPTHWISE_CONV) and nxt is not None \
                and nxt.kind is LayerKind.BATCHNORM:
            if layer.index in referenced:
                raise ConfigError(f"conv {layer.index} output is consumed before its BatchNorm")
            w = model.weight(layer, 'weight').astype(np.float64)
            b = model.weight(layer, 'bias')
            b = np.zeros(w.shape[0]) if b is None else b.astype(np.float64)
            gamma, beta, mean, var = (model.weight(nxt, r).astype(np.float64)
                                      for r in ('gamma', 'beta', 'mean', 'var'))
            scale = gamma / np.sqrt(var + nxt.attrs.get('eps', BN_EPS))

            params = dict(layer.params)
            params.setdefault('bias', f"layer{layer.index}.bias")
            weights[params['weight']] = Tensor.from_array(
                (w * scale[:, None, None, None]).astype(np.float32))
            weights[params['bias']] = Tensor.from_array((beta + scale * (b - mean)).astype(np.float32))
            for key in nxt.params.values():
                weights.pop(key, None)

            index_map[layer.index] = index_map[nxt.index] = new_index
            new_layers.append(LayerSpec(new_index, layer.kind, copy.deepcopy(layer.attrs), params))
            logger.debug("Fused conv %d with batchnorm %d -> layer %d", layer.index, nxt.index, new_index)
            i += 2
            continue

        attrs = copy.deepcopy(layer.attrs)
        if layer.kind is LayerKind.RESIDUAL_ADD:
            attrs['source'] = index_map[attrs['source']]
        index_map[layer.index] = new_index
        new_layers.append(LayerSpec(new_index, layer.kind, attrs, dict(layer.params)))
        i += 1

    fused = ModelGraph(
        layers=new_layers,
        weights=weights,
        descriptor_dim=model.descriptor_dim,
        arch=model.arch,
        input_shape=model.input_shape,
        metadata=dict(model.metadata, fused=True),
    )
    validate_graph(fused)
    return fused


def layer_parameter_counts(model: ModelGraph) -> Dict[int, int]:
    return {
        layer.index: sum(model.weights[k].size for k in layer.params.values())
        for layer in model.layers
    }
