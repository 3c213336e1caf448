#!/usr/bin/env python3
"""
Global pooling heads: SPoC, MAC, GeM and NetVLAD, plus projection/normalization.

Feature maps are [..., D, H, W]; a leading batch axis is optional.
"""

import logging
from typing import Optional

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import softmax

from errors import ShapeError
from utils import PoolingKind, l2_normalize_rows

logger = logging.getLogger(__name__)

GEM_EPS = 1e-6
DEFAULT_GEM_P = 3.0
DEFAULT_NETVLAD_CLUSTERS = 8


def _check_spatial(features: np.ndarray):
    if features.ndim < 3:
        raise ShapeError(f"pooling expects [..., D, H, W], got rank {features.ndim}")
    if features.shape[-1] < 1 or features.shape[-2] < 1:
        raise ShapeError(f"pooling needs H, W >= 1, got {features.shape[-2:]}")


def spoc(features) -> np.ndarray:
    """Uniform spatial average per channel"""
    f = np.asarray(features, dtype=np.float64)
    _check_spatial(f)
    return f.mean(axis=(-2, -1)).astype(np.float32)


def mac(features) -> np.ndarray:
    """Spatial maximum per channel"""
    f = np.asarray(features, dtype=np.float32)
    _check_spatial(f)
    return f.max(axis=(-2, -1))


def gem(features, p=DEFAULT_GEM_P, eps: float = GEM_EPS) -> np.ndarray:
    """Generalized mean (mean of F^p)^(1/p); p scalar or one value per channel"""
    f = np.asarray(features, dtype=np.float64)
    _check_spatial(f)
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 1):
        raise ValueError(f"GeM exponent p must be >= 1, got min {p.min()}")
    if p.ndim and p.size not in (1, f.shape[-3]):
        raise ShapeError(f"GeM has {p.size} exponents for {f.shape[-3]} channels")
    p = p.reshape(-1)
    pooled = (np.clip(f, eps, None) ** p.reshape(-1, 1, 1)).mean(axis=(-2, -1))
    return (pooled ** (1.0 / p)).astype(np.float32)


def netvlad_assign(x, codes) -> np.ndarray:
    """Soft assignment a_k = softmax_k <x, c_k>; x is [d] or [N, d]"""
    x = np.asarray(x, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 2 or x.shape[-1] != codes.shape[1]:
        raise ShapeError(f"descriptor dim {x.shape[-1]} does not match code dim {codes.shape[-1]}")
    return softmax(x @ codes.T, axis=-1)


def netvlad_pool(X, codes, normalize: bool = True) -> np.ndarray:
    """Weighted residual sum v_k = sum_n a_nk (x_n - c_k), flattened k-major.

    With `normalize`, each block is L2-normalized and then the whole vector.
    """
    X = np.asarray(X, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError(f"netvlad_pool expects [N >= 1, d] descriptors, got {X.shape}")
    assign = netvlad_assign(X, codes)
    vlad = assign.T @ X - assign.sum(axis=0)[:, None] * codes
    if normalize:
        vlad = l2_normalize_rows(vlad).astype(np.float64)
        return l2_normalize_rows(vlad.reshape(-1))
    return vlad.reshape(-1).astype(np.float32)


def netvlad_features(features, codes) -> np.ndarray:
    """Batched NetVLAD over [N, C, H, W] maps -> [N, K*C]"""
    f = np.asarray(features, dtype=np.float64)
    _check_spatial(f)
    n, c = f.shape[:2]
    local = f.reshape(n, c, -1).transpose(0, 2, 1)
    return np.stack([netvlad_pool(local[i], codes) for i in range(n)])


def project_normalize(v, projection: Optional[np.ndarray] = None) -> np.ndarray:
    """Optional linear projection [D_out, D_in] followed by L2 normalization"""
    v = np.asarray(v, dtype=np.float64)
    if projection is not None:
        projection = np.asarray(projection, dtype=np.float64)
        if projection.ndim != 2 or projection.shape[1] != v.shape[-1]:
            raise ShapeError(
                f"projection expects input dim {projection.shape[-1]}, got {v.shape[-1]}"
            )
        v = v @ projection.T
    return l2_normalize_rows(v)


def pooled_dim(kind: PoolingKind, channels: int, clusters: int = DEFAULT_NETVLAD_CLUSTERS) -> int:
    if kind is PoolingKind.NETVLAD:
        return clusters * channels
    return channels


def head_parameter_count(kind: PoolingKind, channels: int,
                         clusters: int = DEFAULT_NETVLAD_CLUSTERS) -> int:
    """Stored parameters of a head: none for SPoC/MAC, D for GeM, K*d for NetVLAD"""
    if kind is PoolingKind.GEM:
        return channels
    if kind is PoolingKind.NETVLAD:
        return clusters * channels
    return 0


def apply_head(kind: PoolingKind, features: np.ndarray, p=None, codes=None) -> np.ndarray:
    if kind is PoolingKind.SPOC:
        return spoc(features)
    if kind is PoolingKind.MAC:
        return mac(features)
    if kind is PoolingKind.GEM:
        return gem(features, DEFAULT_GEM_P if p is None else p)
    return netvlad_features(features, codes).astype(np.float32)


def fit_netvlad_codes(local_features: np.ndarray, clusters: int, seed: int) -> np.ndarray:
    """Seeded k-means (k-means++ init) over [M, d] local descriptors"""
    data = np.asarray(local_features, dtype=np.float64)
    if data.shape[0] < clusters:
        raise ShapeError(f"need at least {clusters} local features, got {data.shape[0]}")
    centroids, labels = kmeans2(data, clusters, minit='++', seed=seed)
    logger.debug("k-means fitted %d codes over %d local features (%d empty)",
                 clusters, data.shape[0], clusters - len(np.unique(labels)))
    return centroids.astype(np.float32)
