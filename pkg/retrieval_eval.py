#!/usr/bin/env python3
"""
Synthetic place-recognition data, descriptor databases, exact retrieval,
recall@k and the triplet loss.

Perturbation knobs stand in for real-world appearance changes: `noise` for
sensor/appearance noise, `brightness` for illumination shifts and
`translation` for viewpoint shifts.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from errors import ConfigError, RetrievalError, ShapeError
from model_graph import check_batch
from models import DescriptorDB, ModelGraph, PlaceDataset, QuantizedModel, Tensor, TripletSample
from quant_engine import forward
from tensor_core import iter_tensor_files, load_tensor, load_tensors, save_tensor, save_tensors
from utils import DType

logger = logging.getLogger(__name__)

DEFAULT_PLACES = 64
DEFAULT_QUERIES_PER_PLACE = 4
DEFAULT_SMOOTHING = 2.0
ENCODE_BATCH = 64

INDEX_FILE = "index.txt"
GT_FILE = "gt.txt"


def generate_synthetic(num_places: int = DEFAULT_PLACES, queries_per_place: int = DEFAULT_QUERIES_PER_PLACE,
                       input_shape: Tuple[int, int, int] = (3, 32, 32), noise: float = 0.0,
                       brightness: float = 0.0, translation: int = 0, seed: int = 0,
                       smoothing: float = DEFAULT_SMOOTHING) -> PlaceDataset:
    """Low-pass noise references (unit std) and perturbed query copies"""
    if num_places < 2:
        raise ConfigError(f"need at least 2 places, got {num_places}")
    if queries_per_place < 1:
        raise ConfigError(f"need at least 1 query per place, got {queries_per_place}")
    if noise < 0 or brightness < 0 or translation < 0:
        raise ConfigError("perturbation magnitudes must be >= 0")

    rng = np.random.default_rng(seed)
    shape = (num_places,) + tuple(input_shape)
    refs = gaussian_filter(rng.standard_normal(shape), sigma=(0, 0, smoothing, smoothing), mode='wrap')
    refs -= refs.mean(axis=(1, 2, 3), keepdims=True)
    refs /= refs.std(axis=(1, 2, 3), keepdims=True)

    queries = []
    for place in range(num_places):
        for _ in range(queries_per_place):
            q = refs[place].copy()
            if brightness > 0:
                q += rng.uniform(-brightness, brightness)
            if translation > 0:
                dy, dx = rng.integers(-translation, translation + 1, size=2)
                q = np.roll(q, (int(dy), int(dx)), axis=(1, 2))
            if noise > 0:
                q += rng.normal(0.0, noise, size=q.shape)
            queries.append(q)

    return PlaceDataset(
        references=refs.astype(np.float32),
        queries=np.stack(queries).astype(np.float32),
        ground_truth=np.repeat(np.arange(num_places, dtype=np.int32), queries_per_place),
        seed=seed, noise=noise, brightness=brightness, translation=translation,
    )


def save_dataset(dataset: PlaceDataset, directory: Union[str, Path]) -> Path:
    """refs/ and queries/ QTNS files, an index (query path, reference path, place id) and gt.txt"""
    root = Path(directory)
    (root / "refs").mkdir(parents=True, exist_ok=True)
    (root / "queries").mkdir(parents=True, exist_ok=True)

    for place, ref in enumerate(dataset.references):
        save_tensor(root / "refs" / f"ref_{place:05d}.qtns", Tensor.from_array(ref))
    lines = [
        f"# seed={dataset.seed} noise={dataset.noise} brightness={dataset.brightness} "
        f"translation={dataset.translation}"
    ]
    for i, (query, place) in enumerate(zip(dataset.queries, dataset.ground_truth)):
        name = f"queries/query_{i:05d}.qtns"
        save_tensor(root / name, Tensor.from_array(query))
        lines.append(f"{name} refs/ref_{int(place):05d}.qtns {int(place)}")

    (root / INDEX_FILE).write_text("\n".join(lines) + "\n", encoding='utf-8')
    save_ground_truth(root / GT_FILE, dataset.ground_truth)
    logger.info("Wrote %d references and %d queries to %s", dataset.num_places, len(dataset.queries), root)
    return root


def load_dataset(directory: Union[str, Path]) -> PlaceDataset:
    root = Path(directory)
    index_path = root / INDEX_FILE
    if not index_path.exists():
        raise FileNotFoundError(f"Dataset index not found at: {index_path}")

    knobs = {}
    queries, places = [], []
    for line in index_path.read_text(encoding='utf-8').splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith('#'):
            knobs.update(item.split('=', 1) for item in line[1:].split() if '=' in item)
            continue
        parts = line.split()
        if len(parts) != 3:
            raise RetrievalError(f"{index_path}: malformed index line {line!r}")
        queries.append(load_tensor(root / parts[0]).values())
        places.append(int(parts[2]))

    references = [load_tensor(p).values() for p in iter_tensor_files(root / "refs")]
    if not references or not queries:
        raise RetrievalError(f"{root}: dataset has no references or no queries")
    ground_truth = np.asarray(places, dtype=np.int32)
    if ground_truth.max() >= len(references) or ground_truth.min() < 0:
        raise RetrievalError(f"{root}: ground truth references a missing place")
    return PlaceDataset(
        references=np.stack(references).astype(np.float32),
        queries=np.stack(queries).astype(np.float32),
        ground_truth=ground_truth,
        seed=int(knobs.get('seed', 0)),
        noise=float(knobs.get('noise', 0.0)),
        brightness=float(knobs.get('brightness', 0.0)),
        translation=int(knobs.get('translation', 0)),
    )


def save_ground_truth(path: Union[str, Path], ground_truth: Sequence[int]) -> None:
    Path(path).write_text("".join(f"{int(g)}\n" for g in ground_truth), encoding='utf-8')


def load_ground_truth(path: Union[str, Path]) -> np.ndarray:
    """One place id per query, in query order"""
    values = [line.split()[-1] for line in Path(path).read_text(encoding='utf-8').splitlines()
              if line.strip() and not line.lstrip().startswith('#')]
    try:
        return np.asarray([int(v) for v in values], dtype=np.int32)
    except ValueError as e:
        raise RetrievalError(f"{path}: malformed ground truth ({e})") from e


def encode_db(model: Union[ModelGraph, QuantizedModel], images, place_ids,
              batch_size: int = ENCODE_BATCH) -> DescriptorDB:
    """Descriptors of `images` in order, f32 or quantized forward"""
    graph = model.graph if isinstance(model, QuantizedModel) else model
    batch = check_batch(graph, images)
    rows = [forward(model, batch[i:i + batch_size]) for i in range(0, batch.shape[0], batch_size)]
    return DescriptorDB(descriptors=np.concatenate(rows), place_ids=place_ids)


def encode_dataset(model: Union[ModelGraph, QuantizedModel], dataset: PlaceDataset,
                   side: str = "references") -> DescriptorDB:
    if side == "references":
        return encode_db(model, dataset.references, np.arange(dataset.num_places, dtype=np.int32))
    if side == "queries":
        return encode_db(model, dataset.queries, dataset.ground_truth)
    raise ConfigError(f"dataset side must be 'references' or 'queries', got {side!r}")


def save_db(db: DescriptorDB, path: Union[str, Path]) -> None:
    save_tensors(path, [Tensor.from_array(db.descriptors), Tensor.from_array(db.place_ids, DType.I32)])


def load_db(path: Union[str, Path]) -> DescriptorDB:
    if not Path(path).exists():
        raise FileNotFoundError(f"Descriptor DB not found at: {path}")
    tensors = load_tensors(path)
    if len(tensors) != 2 or tensors[0].dtype is not DType.F32 or tensors[1].dtype is not DType.I32:
        raise RetrievalError(f"{path}: expected an f32 descriptor tensor followed by i32 place ids")
    return DescriptorDB(descriptors=tensors[0].values(), place_ids=tensors[1].values())


def _rank_block(descriptors: np.ndarray, queries: np.ndarray, k: int, offset: int = 0):
    scores = queries @ descriptors.astype(np.float64).T
    order = np.argsort(-scores, axis=1, kind='stable')[:, :k]
    return order + offset, np.take_along_axis(scores, order, axis=1)


def search_topk(db: DescriptorDB, query, k: int, threads: int = 1) -> np.ndarray:
    """Exact top-k row indices by inner product, descending, ties to the lower index.

    A single query vector gives [k]; a [Q, D] query matrix gives [Q, k].
    With threads > 1 the database is split into row blocks searched in parallel.
    """
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = q[None] if single else q
    if q.ndim != 2 or q.shape[1] != db.dim:
        raise ShapeError(f"query dim {q.shape[-1]} does not match database dim {db.dim}")
    if not 1 <= k <= db.size:
        raise RetrievalError(f"k must be in [1, {db.size}], got {k}")

    if threads <= 1 or db.size < 2 * threads:
        order, _ = _rank_block(db.descriptors, q, k)
    else:
        bounds = np.linspace(0, db.size, threads + 1).astype(int)
        blocks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(
                lambda b: _rank_block(db.descriptors[b[0]:b[1]], q, min(k, b[1] - b[0]), b[0]), blocks))
        idx = np.concatenate([p[0] for p in parts], axis=1)
        scores = np.concatenate([p[1] for p in parts], axis=1)
        order = np.empty((q.shape[0], k), dtype=idx.dtype)
        for row in range(q.shape[0]):
            merged = np.lexsort((idx[row], -scores[row]))[:k]
            order[row] = idx[row][merged]
    return order[0] if single else order


def ranked_place_ids(db: DescriptorDB, query, k: int) -> np.ndarray:
    return db.place_ids[search_topk(db, query, k)]


def recall_at_k(queries: Union[DescriptorDB, np.ndarray], references: DescriptorDB,
                ground_truth, k: int) -> float:
    """Fraction of queries whose true place is among their top-k references"""
    q = queries.descriptors if isinstance(queries, DescriptorDB) else np.asarray(queries, dtype=np.float32)
    gt = np.asarray(ground_truth, dtype=np.int64).reshape(-1)
    if q.ndim != 2 or q.shape[0] == 0 or gt.size == 0:
        raise RetrievalError("recall needs a non-empty query set")
    if gt.size != q.shape[0]:
        raise RetrievalError(f"{q.shape[0]} queries but {gt.size} ground-truth ids")
    ids = references.place_ids[search_topk(references, q, k)]
    return float(np.mean(np.any(ids == gt[:, None], axis=1)))


def recall_curve(queries: DescriptorDB, references: DescriptorDB, ground_truth,
                 ks: Sequence[int]) -> List[Tuple[int, float]]:
    return [(k, recall_at_k(queries, references, ground_truth, k)) for k in ks]


def top1_agreement(a: DescriptorDB, b: DescriptorDB, references_a: DescriptorDB,
                   references_b: DescriptorDB) -> float:
    """Share of queries whose nearest reference is the same under two encoders"""
    top_a = search_topk(references_a, a.descriptors, 1)[:, 0]
    top_b = search_topk(references_b, b.descriptors, 1)[:, 0]
    return float(np.mean(top_a == top_b))


def triplet_loss(t: TripletSample, similarity: bool = False) -> float:
    """max(0, d(a, p) - d(a, n) + margin) with cosine distance d = 1 - <x, y>.

    `similarity=True` evaluates the printed form with f = <x, y> instead.
    """
    if t.margin < 0:
        raise ConfigError(f"triplet margin must be >= 0, got {t.margin}")
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (t.anchor, t.positive, t.negative))
    if not a.shape == p.shape == n.shape:
        raise ShapeError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    if similarity:
        f_ap, f_an = float(a @ p), float(a @ n)
    else:
        f_ap, f_an = 1.0 - float(a @ p), 1.0 - float(a @ n)
    return max(0.0, f_ap - f_an + t.margin)


def mean_triplet_loss(queries: DescriptorDB, references: DescriptorDB, margin: float = 0.1,
                      seed: Optional[int] = None) -> float:
    """Triplet loss averaged over queries: positive = true reference, negative = a random other place"""
    rng = np.random.default_rng(seed)
    by_place = {int(pid): i for i, pid in enumerate(references.place_ids)}
    losses = []
    for desc, place in zip(queries.descriptors, queries.place_ids):
        others = [i for pid, i in by_place.items() if pid != int(place)]
        if not others or int(place) not in by_place:
            continue
        neg = references.descriptors[others[int(rng.integers(len(others)))]]
        losses.append(triplet_loss(TripletSample(desc, references.descriptors[by_place[int(place)]], neg, margin)))
    if not losses:
        raise RetrievalError("no query has both a positive and a negative reference")
    return float(np.mean(losses))
