"""Latency benchmarking, the k1/k2 fit, dimension planning and memory checks."""

import numpy as np
import pytest
from threadpoolctl import threadpool_info

import perf_model
from errors import ConfigError, InfeasibleBudgetError
from models import LatencyModel, LatencySample, MemoryBudget, PrecisionConfig
from perf_model import (
    bench_latency,
    check_memory,
    database_bytes,
    encode_latency,
    fit_k1_k2,
    literal_descriptor_dim,
    plan_dim,
    precision_label,
    require_plan,
)
from quant_engine import quantize_model
from report_generator import ReportGenerator
from retrieval_eval import search_topk

# N = 1000 rows of the reference latency table: D -> (tau_r, tau_total)
TABLE = {512: (0.0485, 0.4733), 1024: (0.0908, 0.5156), 2048: (0.1720, 0.5968), 4096: (0.3396, 0.7644)}
TAU_E = 0.4248


def sample(n, dim, tau_r, tau_e=TAU_E):
    return LatencySample(n=n, dim=dim, tau_e=tau_e, tau_r=tau_r)


def table_fit():
    return fit_k1_k2([sample(1000, 512, TABLE[512][0]), sample(1000, 4096, TABLE[4096][0])])


class TestFit:

    def test_noiseless_grid_recovers_coefficients(self):
        samples = [sample(n, d, 8e-5 * d + 7e-6 * n) for n in (1000, 2000, 4000) for d in (512, 1024, 2048, 4096)]
        model = fit_k1_k2(samples)
        assert model.k1 == pytest.approx(8e-5, rel=1e-9)
        assert model.k2 == pytest.approx(7e-6, rel=1e-9)
        assert model.n_range == (1000, 4000)
        assert model.d_range == (512, 4096)

    def test_two_point_table_fit(self):
        model = table_fit()
        assert model.k1 == pytest.approx(8.1222e-5, rel=1e-4)
        assert model.k2 * 1000 == pytest.approx(0.006915, rel=1e-3)
        assert model.tau_e == pytest.approx(TAU_E)

    @pytest.mark.parametrize("dim", [1024, 2048])
    def test_table_fit_interpolates(self, dim):
        predicted = table_fit().predict_retrieval(dim, 1000)
        assert abs(predicted - TABLE[dim][0]) <= 0.1 * TABLE[dim][0]

    def test_total_latency_is_encode_plus_retrieval(self):
        model = table_fit()
        assert model.predict_total(512, 1000) == pytest.approx(TABLE[512][1], abs=1e-9)
        assert sample(1000, 512, 0.0485).tau_total == pytest.approx(0.4733)

    def test_negative_coefficient_clamped(self):
        samples = [sample(100, 10, 1.0), sample(200, 10, 0.5), sample(300, 20, 0.4)]
        model = fit_k1_k2(samples)
        assert model.k1 >= 0.0
        assert model.k2 == 0.0

    def test_too_few_samples(self):
        with pytest.raises(ConfigError):
            fit_k1_k2([sample(10, 10, 0.1)])

    def test_proportional_grid_rejected(self):
        with pytest.raises(ConfigError, match="rank"):
            fit_k1_k2([sample(100, 10, 0.1), sample(200, 20, 0.2), sample(400, 40, 0.4)])


class TestPlanDim:

    def test_table_plan_recommends_1024(self):
        plan = plan_dim(0.5156, 1000, table_fit(), tau_e=TAU_E)
        assert plan.feasible
        assert plan.dimension == 1024
        assert plan.raw_dimension == pytest.approx(1033, abs=1.5)
        assert plan.slack >= 0
        assert require_plan(0.5156, 1000, table_fit(), tau_e=TAU_E) == 1024

    def test_target_at_encode_plus_map_time_is_infeasible(self):
        model = LatencyModel(k1=2 ** -10, k2=2 ** -10, tau_e=0.5)
        plan = plan_dim(1.5, 1024, model)
        assert not plan.feasible
        assert plan.dimension is None
        with pytest.raises(InfeasibleBudgetError):
            require_plan(1.5, 1024, model)

    def test_raw_dimension_below_smallest(self):
        model = LatencyModel(k1=2 ** -10, k2=2 ** -10, tau_e=0.5)
        plan = plan_dim(1.75, 1024, model)
        assert not plan.feasible
        assert plan.raw_dimension == 256.0

    def test_exact_fit_at_smallest_dimension(self):
        model = LatencyModel(k1=2 ** -10, k2=2 ** -10, tau_e=0.5)
        plan = plan_dim(2.0, 1024, model)
        assert plan.dimension == 512
        assert plan.slack == 0.0

    def test_zero_k1_gives_largest_dimension(self):
        plan = plan_dim(1.0, 100, LatencyModel(k1=0.0, k2=1e-4, tau_e=0.1))
        assert plan.dimension == 4096

    def test_custom_dimension_grid(self):
        model = LatencyModel(k1=2 ** -10, k2=0.0)
        assert plan_dim(1.0, 1, model, dims=[128, 256, 2048]).dimension == 256

    def test_literal_arrangement_differs(self):
        model = LatencyModel(k1=2 ** -10, k2=2 ** -10, tau_e=0.5)
        assert literal_descriptor_dim(2.0, 1024, model) == 1024.5
        assert plan_dim(2.0, 1024, model).raw_dimension == 512.0


class TestMemory:

    def test_required_bytes(self):
        check = check_memory(MemoryBudget(memory_bytes=5_000_000, n=1000, dim=1024))
        assert check.required_bytes == 4_096_000
        assert check.passed

    def test_strict_boundary(self):
        assert not check_memory(MemoryBudget(memory_bytes=4_096_000, n=1000, dim=1024)).passed
        assert check_memory(MemoryBudget(memory_bytes=4_096_001, n=1000, dim=1024)).passed

    def test_eightfold_between_4096_and_512(self):
        assert database_bytes(1000, 4096) == 8 * database_bytes(1000, 512)

    def test_non_positive_rejected(self):
        with pytest.raises(ConfigError):
            check_memory(MemoryBudget(memory_bytes=0, n=1, dim=1))


class TestBench:

    def test_grid_and_csv(self, vgg_model, tmp_path):
        samples = bench_latency(vgg_model, [10, 20], [8, 16], repetitions=3, seed=0)
        assert [(s.n, s.dim) for s in samples] == [(10, 8), (10, 16), (20, 8), (20, 16)]
        assert all(s.tau_e > 0 and s.tau_r > 0 and s.precision == "f32" for s in samples)
        assert len({s.tau_e for s in samples}) == 1

        path = tmp_path / "bench.csv"
        path.write_text(ReportGenerator.bench_csv(samples), encoding='utf-8')
        loaded = ReportGenerator.read_bench_csv(path)
        assert [(s.n, s.dim, s.tau_r, s.repetitions) for s in loaded] == \
            [(s.n, s.dim, s.tau_r, s.repetitions) for s in samples]

    def test_threaded_retrieval(self, vgg_model):
        samples = bench_latency(vgg_model, [64], [8], repetitions=3, threads=2)
        assert len(samples) == 1

    def test_retrieval_grows_with_dimension(self, vgg_model):
        samples = bench_latency(vgg_model, [2000], [512, 4096], repetitions=7, seed=1)
        assert samples[1].tau_r > samples[0].tau_r

    def test_doubling_map_size_roughly_doubles_retrieval(self, vgg_model):
        small, large = bench_latency(vgg_model, [20000, 40000], [256], repetitions=7, seed=2)
        assert 1.0 <= large.tau_r / small.tau_r <= 4.0

    def test_blas_pinned_to_one_thread(self, vgg_model, monkeypatch):
        seen = []

        def recording_search(db, query, k, threads=1):
            seen.extend(info['num_threads'] for info in threadpool_info() if info['user_api'] == 'blas')
            return search_topk(db, query, k, threads=threads)

        monkeypatch.setattr(perf_model, "search_topk", recording_search)
        bench_latency(vgg_model, [16], [8], repetitions=3)
        assert all(n == 1 for n in seen)

    def test_encode_latency_positive(self, vgg_model, calib_batch):
        assert encode_latency(vgg_model, calib_batch[0]) > 0

    def test_repetitions_floor(self, vgg_model):
        with pytest.raises(ConfigError):
            bench_latency(vgg_model, [10], [8], repetitions=2)

    def test_precision_labels(self, vgg_model, calib_batch):
        t = len(vgg_model.quantizable_layers())
        assert precision_label(vgg_model) == "f32"
        assert precision_label(quantize_model(vgg_model, PrecisionConfig([16] * t))) == "f16"
        assert precision_label(quantize_model(vgg_model, PrecisionConfig([8] * t), calib_batch)) == "int8"
        mixed = PrecisionConfig([4] + [16] * (t - 1))
        assert precision_label(quantize_model(vgg_model, mixed, calib_batch)) == "mixed"

    def test_malformed_csv(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("N,D\n1,2\n", encoding='utf-8')
        with pytest.raises(ConfigError):
            ReportGenerator.read_bench_csv(path)
