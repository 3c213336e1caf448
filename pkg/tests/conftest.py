"""Shared fixtures: repo root on sys.path, small seeded models and batches."""

import sys
from pathlib import Path

import numpy as np
import pytest

_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(_ROOT))

from model_graph import build_backbone, fuse_conv_bn  # noqa: E402
from models import ArchConfig  # noqa: E402
from utils import PoolingKind  # noqa: E402


def small_config(**overrides) -> ArchConfig:
    base = dict(family="mini-vgg", width=0.5, depth=2, input_shape=(3, 16, 16),
                descriptor_dim=16, pooling=PoolingKind.GEM, seed=0)
    base.update(overrides)
    return ArchConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vgg_model():
    """mini-vgg, 2 convs + projection: 3 quantizable layers"""
    return build_backbone(small_config())


@pytest.fixture
def resnet_model():
    return build_backbone(small_config(family="mini-resnet", width=0.25, depth=1))


@pytest.fixture
def mobilenet_model():
    return build_backbone(small_config(family="mini-mobilenet", width=0.5, depth=2, expansion=2))


@pytest.fixture
def fused_resnet(resnet_model):
    return fuse_conv_bn(resnet_model)


@pytest.fixture
def calib_batch():
    return np.random.default_rng(99).standard_normal((8, 3, 16, 16)).astype(np.float32)
