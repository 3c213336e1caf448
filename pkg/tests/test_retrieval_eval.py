"""Synthetic places, descriptor databases, exact top-k and the evaluation metrics."""

import numpy as np
import pytest

from errors import ConfigError, RetrievalError, ShapeError
from models import DescriptorDB, TripletSample
from retrieval_eval import (
    encode_dataset,
    generate_synthetic,
    load_dataset,
    load_db,
    load_ground_truth,
    mean_triplet_loss,
    ranked_place_ids,
    recall_at_k,
    recall_curve,
    save_dataset,
    save_db,
    search_topk,
    top1_agreement,
    triplet_loss,
)


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def full_sort_topk(descriptors, query, k):
    scores = [float(np.dot(row, query)) for row in np.asarray(descriptors, dtype=np.float64)]
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]


class TestSyntheticData:

    def test_shapes_and_ground_truth(self):
        ds = generate_synthetic(8, 3, (3, 16, 16), noise=0.1, seed=1)
        assert ds.references.shape == (8, 3, 16, 16)
        assert ds.queries.shape == (24, 3, 16, 16)
        assert ds.ground_truth.tolist() == [p for p in range(8) for _ in range(3)]
        assert ds.references.dtype == np.float32

    def test_seed_determinism(self):
        a = generate_synthetic(6, 2, (3, 8, 8), noise=0.2, brightness=0.1, translation=1, seed=5)
        b = generate_synthetic(6, 2, (3, 8, 8), noise=0.2, brightness=0.1, translation=1, seed=5)
        np.testing.assert_array_equal(a.queries, b.queries)
        np.testing.assert_array_equal(a.references, b.references)
        c = generate_synthetic(6, 2, (3, 8, 8), noise=0.2, seed=6)
        assert not np.array_equal(a.references, c.references)

    def test_zero_perturbation_copies_references(self):
        ds = generate_synthetic(5, 2, (3, 8, 8), seed=0)
        np.testing.assert_array_equal(ds.queries, np.repeat(ds.references, 2, axis=0))

    def test_references_standardized(self):
        ds = generate_synthetic(4, 1, (3, 16, 16), seed=2)
        np.testing.assert_allclose(ds.references.std(axis=(1, 2, 3)), 1.0, rtol=1e-4)

    @pytest.mark.parametrize("kwargs", [dict(num_places=1), dict(queries_per_place=0), dict(noise=-0.1)])
    def test_invalid_knobs(self, kwargs):
        with pytest.raises(ConfigError):
            generate_synthetic(**kwargs)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_overwhelming_noise_gives_chance_recall(self, vgg_model, seed):
        # noise sigma 50x the unit reference std
        ds = generate_synthetic(64, 4, vgg_model.input_shape, noise=50.0, seed=seed)
        refs = encode_dataset(vgg_model, ds, "references")
        queries = encode_dataset(vgg_model, ds, "queries")
        chance = 1 / ds.num_places
        band = 3 * np.sqrt(chance / len(ds.queries))
        assert abs(recall_at_k(queries, refs, ds.ground_truth, 1) - chance) <= band

    def test_directory_round_trip(self, tmp_path):
        ds = generate_synthetic(4, 2, (3, 8, 8), noise=0.1, translation=1, seed=9)
        save_dataset(ds, tmp_path / "data")
        loaded = load_dataset(tmp_path / "data")
        np.testing.assert_array_equal(loaded.references, ds.references)
        np.testing.assert_array_equal(loaded.queries, ds.queries)
        np.testing.assert_array_equal(loaded.ground_truth, ds.ground_truth)
        assert (loaded.seed, loaded.noise, loaded.translation) == (9, 0.1, 1)
        np.testing.assert_array_equal(load_ground_truth(tmp_path / "data" / "gt.txt"), ds.ground_truth)

    def test_missing_index(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)


class TestDescriptorDB:

    def test_properties(self, rng):
        db = DescriptorDB(unit_rows(rng, 10, 4), np.arange(10))
        assert (db.size, db.dim, db.memory_bytes) == (10, 4, 160)

    def test_rejects_mismatched_ids(self):
        with pytest.raises(ValueError):
            DescriptorDB(np.zeros((3, 2)), [0, 1])

    def test_save_load(self, tmp_path, rng):
        db = DescriptorDB(unit_rows(rng, 7, 5), [3, 1, 4, 1, 5, 9, 2])
        save_db(db, tmp_path / "db.qtns")
        loaded = load_db(tmp_path / "db.qtns")
        np.testing.assert_array_equal(loaded.descriptors, db.descriptors)
        np.testing.assert_array_equal(loaded.place_ids, db.place_ids)

    def test_encode_zero_noise_recall_is_perfect(self, vgg_model):
        ds = generate_synthetic(6, 2, vgg_model.input_shape, seed=3)
        refs = encode_dataset(vgg_model, ds, "references")
        queries = encode_dataset(vgg_model, ds, "queries")
        assert refs.dim == vgg_model.descriptor_dim
        np.testing.assert_allclose(np.linalg.norm(refs.descriptors, axis=1), 1.0, atol=1e-5)
        assert recall_at_k(queries, refs, ds.ground_truth, 1) == 1.0


class TestSearchTopK:

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(1000):
            n, d = int(rng.integers(1, 40)), int(rng.integers(1, 12))
            k = int(rng.integers(1, n + 1))
            db = DescriptorDB(unit_rows(rng, n, d), np.arange(n))
            query = unit_rows(rng, 1, d)[0]
            threads = 1 + trial % 3
            got = search_topk(db, query, k, threads=threads)
            assert got.tolist() == full_sort_topk(db.descriptors, query, k)

    def test_batched_queries(self, rng):
        db = DescriptorDB(unit_rows(rng, 30, 8), np.arange(30))
        queries = unit_rows(rng, 5, 8)
        out = search_topk(db, queries, 4, threads=3)
        assert out.shape == (5, 4)
        for row, q in zip(out, queries):
            assert row.tolist() == full_sort_topk(db.descriptors, q, 4)

    def test_ties_go_to_lower_index(self):
        db = DescriptorDB([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]], [0, 1, 2, 3])
        assert search_topk(db, np.array([1.0, 0.0]), 3).tolist() == [0, 2, 3]
        assert search_topk(db, np.array([1.0, 0.0]), 3, threads=2).tolist() == [0, 2, 3]

    def test_ranked_place_ids(self):
        db = DescriptorDB([[0.0, 1.0], [1.0, 0.0], [0.6, 0.8]], [7, 3, 5])
        assert ranked_place_ids(db, np.array([1.0, 0.0]), 2).tolist() == [3, 5]

    def test_k_range(self, rng):
        db = DescriptorDB(unit_rows(rng, 3, 2), np.arange(3))
        with pytest.raises(RetrievalError):
            search_topk(db, np.ones(2), 4)
        with pytest.raises(RetrievalError):
            search_topk(db, np.ones(2), 0)

    def test_dim_checked(self, rng):
        db = DescriptorDB(unit_rows(rng, 3, 2), np.arange(3))
        with pytest.raises(ShapeError):
            search_topk(db, np.ones(3), 1)


class TestRecall:

    def refs(self):
        return DescriptorDB(np.eye(3), [10, 11, 12])

    def test_perfect_recall(self):
        queries = DescriptorDB(np.eye(3), [10, 11, 12])
        assert recall_at_k(queries, self.refs(), [10, 11, 12], 1) == 1.0

    def test_partial_recall(self):
        q = np.array([[1.0, 0.0, 0.0], [0.9, 0.1, 0.0], [0.0, 0.0, 1.0], [0.0, 0.6, 0.8]])
        gt = [10, 11, 12, 11]
        assert recall_at_k(q, self.refs(), gt, 1) == pytest.approx(0.5)
        assert recall_at_k(q, self.refs(), gt, 2) == pytest.approx(1.0)

    def test_curve_is_monotone(self, rng):
        refs = DescriptorDB(unit_rows(rng, 20, 6), np.arange(20))
        queries = unit_rows(rng, 15, 6)
        gt = rng.integers(0, 20, 15)
        values = [r for _, r in recall_curve(DescriptorDB(queries, gt), refs, gt, [1, 5, 10, 20])]
        assert values == sorted(values)
        assert values[-1] == 1.0

    def test_empty_or_mismatched(self):
        with pytest.raises(RetrievalError):
            recall_at_k(np.zeros((0, 3)), self.refs(), [], 1)
        with pytest.raises(RetrievalError):
            recall_at_k(np.eye(3), self.refs(), [10, 11], 1)

    def test_top1_agreement(self):
        refs = self.refs()
        a = DescriptorDB(np.eye(3), [0, 1, 2])
        b = DescriptorDB([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]], [0, 1, 2])
        assert top1_agreement(a, b, refs, refs) == pytest.approx(2 / 3)


class TestTripletLoss:

    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])

    def test_well_separated(self):
        assert triplet_loss(TripletSample(self.e1, self.e1, self.e2, 0.1)) == 0.0

    def test_swapped_positive_and_negative(self):
        assert triplet_loss(TripletSample(self.e1, self.e2, self.e1, 0.1)) == pytest.approx(1.1)

    def test_all_equal_gives_margin(self):
        assert triplet_loss(TripletSample(self.e1, self.e1, self.e1, 0.25)) == pytest.approx(0.25)

    def test_similarity_form(self):
        # f = <x, y>: f(a, p) - f(a, n) + margin
        assert triplet_loss(TripletSample(self.e1, self.e1, self.e2, 0.1), similarity=True) == pytest.approx(1.1)

    def test_negative_margin_rejected(self):
        with pytest.raises(ConfigError):
            triplet_loss(TripletSample(self.e1, self.e1, self.e2, -0.1))

    def test_shape_checked(self):
        with pytest.raises(ShapeError):
            triplet_loss(TripletSample(self.e1, np.ones(3), self.e2))

    def test_mean_over_database(self):
        refs = DescriptorDB(np.eye(3), [0, 1, 2])
        queries = DescriptorDB(np.eye(3), [0, 1, 2])
        assert mean_triplet_loss(queries, refs, margin=0.1, seed=0) == 0.0
        swapped = DescriptorDB(np.eye(3)[[1, 2, 0]], [0, 1, 2])
        # each anchor is orthogonal to its positive; the negative is either itself or orthogonal
        value = mean_triplet_loss(swapped, refs, margin=0.1, seed=0)
        assert value >= 0.1
        assert value == mean_triplet_loss(swapped, refs, margin=0.1, seed=0)

    def test_single_place_rejected(self):
        refs = DescriptorDB(np.eye(2)[:1], [0])
        with pytest.raises(RetrievalError):
            mean_triplet_loss(DescriptorDB(np.eye(2)[:1], [0]), refs)
