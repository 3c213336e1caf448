"""Backbone construction, f32 forward and conv-BN fusion."""

import numpy as np
import pytest

from conftest import small_config
from errors import ConfigError, ShapeError
from model_graph import (
    GraphExecutor,
    build_backbone,
    forward_f32,
    fuse_conv_bn,
    layer_parameter_counts,
    validate_graph,
)
from models import ArchConfig, LayerSpec, ModelGraph, Tensor
from utils import LayerKind, PoolingKind


def conv_bn_graph(rng, cin=3, cout=4, kernel=3, gamma=None, beta=None, mean=None, var=None, bias=True):
    w = rng.standard_normal((cout, cin, kernel, kernel)).astype(np.float32)
    stats = {
        'gamma': rng.uniform(0.5, 1.5, cout) if gamma is None else gamma,
        'beta': rng.uniform(-0.5, 0.5, cout) if beta is None else beta,
        'mean': rng.uniform(-0.5, 0.5, cout) if mean is None else mean,
        'var': rng.uniform(0.5, 1.5, cout) if var is None else var,
    }
    weights = {'c.weight': Tensor.from_array(w)}
    conv_params = {'weight': 'c.weight'}
    if bias:
        weights['c.bias'] = Tensor.from_array(rng.standard_normal(cout).astype(np.float32))
        conv_params['bias'] = 'c.bias'
    bn_params = {}
    for role, values in stats.items():
        weights[f'bn.{role}'] = Tensor.from_array(np.asarray(values, dtype=np.float32).reshape(cout))
        bn_params[role] = f'bn.{role}'
    layers = [
        LayerSpec(0, LayerKind.CONV, {'in_channels': cin, 'out_channels': cout, 'kernel': kernel,
                                      'stride': 1, 'padding': kernel // 2, 'groups': 1}, conv_params),
        LayerSpec(1, LayerKind.BATCHNORM, {'channels': cout, 'eps': 1e-5}, bn_params),
        LayerSpec(2, LayerKind.POOLING_HEAD, {'pooling': 'spoc', 'channels': cout}),
    ]
    return ModelGraph(layers=layers, weights=weights, descriptor_dim=cout, arch="conv-bn",
                      input_shape=(cin, 6, 6))


class TestBuildBackbone:

    @pytest.mark.parametrize("family", ["mini-mobilenet", "mini-resnet", "mini-vgg"])
    def test_deterministic_per_seed(self, family):
        cfg = small_config(family=family, seed=5)
        a, b = build_backbone(cfg), build_backbone(cfg)
        assert a.weights.keys() == b.weights.keys()
        for key in a.weights:
            assert a.weights[key].data.tobytes() == b.weights[key].data.tobytes()

    def test_different_seeds_differ(self):
        a = build_backbone(small_config(seed=1))
        b = build_backbone(small_config(seed=2))
        assert not np.array_equal(a.weights['layer0.weight'].values(), b.weights['layer0.weight'].values())

    def test_mobilenet_stride1_block_has_residual(self, mobilenet_model):
        kinds = [l.kind for l in mobilenet_model.layers]
        assert LayerKind.RESIDUAL_ADD in kinds
        assert LayerKind.DEPTHWISE_CONV in kinds
        dw = next(l for l in mobilenet_model.layers if l.kind is LayerKind.DEPTHWISE_CONV)
        assert dw.attrs['groups'] == dw.attrs['in_channels'] == dw.attrs['out_channels']

    def test_resnet_has_residual_per_block(self):
        model = build_backbone(small_config(family="mini-resnet", width=0.25, depth=3))
        adds = [l for l in model.layers if l.kind is LayerKind.RESIDUAL_ADD]
        assert len(adds) == 3
        for add in adds:
            assert add.attrs['source'] < add.index

    def test_vgg_parameter_count_by_hand(self):
        cfg = ArchConfig(family="mini-vgg", width=1.0, depth=3, input_shape=(3, 32, 32),
                         descriptor_dim=32, pooling=PoolingKind.MAC, seed=0)
        model = build_backbone(cfg)
        convs = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64)
        projection = 32 * 64 + 32
        assert model.parameter_count() == convs + projection
        assert sum(layer_parameter_counts(model).values()) == model.parameter_count()

    def test_gem_head_stores_p_per_channel(self, vgg_model):
        head = vgg_model.head()
        p = vgg_model.weight(head, 'p')
        assert p.shape == (head.attrs['channels'],)
        np.testing.assert_array_equal(p, 3.0)

    def test_netvlad_without_projection_needs_matching_dim(self):
        with pytest.raises(ConfigError, match="projection"):
            build_backbone(small_config(pooling=PoolingKind.NETVLAD, projection=False, descriptor_dim=10))

    def test_netvlad_dimension(self):
        model = build_backbone(small_config(pooling=PoolingKind.NETVLAD, projection=False,
                                            descriptor_dim=4 * 16, clusters=4))
        out = forward_f32(model, np.random.default_rng(0).standard_normal((2, 3, 16, 16)))
        assert out.shape == (2, 64)

    def test_parameter_limit(self):
        with pytest.raises(ConfigError, match="parameters"):
            build_backbone(small_config(width=8.0, depth=4))

    def test_unknown_family(self):
        with pytest.raises(ConfigError):
            build_backbone(small_config(family="mini-alexnet"))


class TestValidateGraph:

    def test_residual_must_reference_earlier_layer(self, resnet_model):
        add = next(l for l in resnet_model.layers if l.kind is LayerKind.RESIDUAL_ADD)
        add.attrs['source'] = add.index
        with pytest.raises(ConfigError, match="residual"):
            validate_graph(resnet_model)

    def test_dangling_weight_handle(self, vgg_model):
        vgg_model.layers[0].params['weight'] = 'missing'
        with pytest.raises(ConfigError, match="does not resolve"):
            validate_graph(vgg_model)


class TestForward:

    @pytest.mark.parametrize("family", ["mini-mobilenet", "mini-resnet", "mini-vgg"])
    def test_unit_norm_rows(self, family):
        model = build_backbone(small_config(family=family, width=0.25))
        out = forward_f32(model, np.random.default_rng(7).standard_normal((5, 3, 16, 16)))
        assert out.shape == (5, model.descriptor_dim)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_single_image_accepted(self, vgg_model):
        out = forward_f32(vgg_model, np.zeros((3, 16, 16), np.float32) + 0.1)
        assert out.shape == (1, 16)

    def test_zero_input_bias_free_vgg_gives_zero_vector(self):
        model = build_backbone(small_config(bias=False, pooling=PoolingKind.MAC))
        raw = forward_f32(model, np.zeros((2, 3, 16, 16)), normalize=False)
        np.testing.assert_array_equal(raw, 0.0)
        np.testing.assert_array_equal(forward_f32(model, np.zeros((2, 3, 16, 16))), 0.0)

    def test_wrong_input_shape(self, vgg_model):
        with pytest.raises(ShapeError):
            forward_f32(vgg_model, np.zeros((1, 3, 8, 8)))

    def test_executor_observes_quantizable_inputs(self, vgg_model):
        seen = []

        class Recorder(GraphExecutor):
            def observe(self, layer, x):
                seen.append(layer.kind)

        Recorder(vgg_model).run(np.ones((1, 3, 16, 16)))
        assert seen == [LayerKind.CONV, LayerKind.CONV, LayerKind.POOLING_HEAD, LayerKind.LINEAR]


class TestFuseConvBN:

    def test_identity_bn_keeps_weights(self, rng):
        eps = 1e-5
        model = conv_bn_graph(rng, gamma=np.ones(4), beta=np.zeros(4), mean=np.zeros(4),
                              var=np.full(4, 1 - eps))
        fused = fuse_conv_bn(model)
        conv = fused.layers[0]
        np.testing.assert_allclose(fused.weight(conv, 'weight'), model.weight(model.layers[0], 'weight'), rtol=1e-6)
        np.testing.assert_allclose(fused.weight(conv, 'bias'), model.weight(model.layers[0], 'bias'), rtol=1e-6)

    def test_scalar_substitution(self, rng):
        eps = 1e-5
        model = conv_bn_graph(rng, cout=1, gamma=[2.0], beta=[0.0], mean=[1.0], var=[4.0 - eps], bias=False)
        fused = fuse_conv_bn(model)
        conv = fused.layers[0]
        np.testing.assert_allclose(fused.weight(conv, 'weight'), model.weight(model.layers[0], 'weight'), rtol=1e-6)
        np.testing.assert_allclose(fused.weight(conv, 'bias'), [-1.0], atol=1e-6)

    def test_removes_batchnorm_layers(self, resnet_model):
        fused = fuse_conv_bn(resnet_model)
        assert fused.is_fused
        assert not resnet_model.is_fused
        assert [l.index for l in fused.layers] == list(range(len(fused.layers)))
        assert all(not k.endswith(('.gamma', '.beta', '.mean', '.var')) for k in fused.weights)
        assert fused.metadata['fused'] is True

    def test_input_graph_unchanged(self, resnet_model):
        before = len(resnet_model.layers)
        fuse_conv_bn(resnet_model)
        assert len(resnet_model.layers) == before

    def test_equivalence_over_seeded_pairs(self):
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            model = conv_bn_graph(rng)
            x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
            a = GraphExecutor(model).run(x, normalize=False)
            b = GraphExecutor(fuse_conv_bn(model)).run(x, normalize=False)
            worst = max(worst, float(np.abs(a - b).max()))
        assert worst < 1e-4

    @pytest.mark.parametrize("family", ["mini-mobilenet", "mini-resnet"])
    def test_descriptors_match_unfused(self, family):
        model = build_backbone(small_config(family=family, width=0.25, seed=11))
        x = np.random.default_rng(3).standard_normal((50, 3, 16, 16)).astype(np.float32)
        diff = np.abs(forward_f32(model, x) - forward_f32(fuse_conv_bn(model), x)).max()
        assert diff < 1e-4

    def test_standalone_batchnorm_rejected(self, rng):
        model = conv_bn_graph(rng)
        model.layers[0] = LayerSpec(0, LayerKind.RELU)
        with pytest.raises(ConfigError, match="does not follow a convolution"):
            fuse_conv_bn(model)
