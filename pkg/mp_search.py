#!/usr/bin/env python3
"""
Genetic mixed-precision search over per-layer bit-widths {4, 8, 16}
under an average bit-width budget B.
"""

import itertools
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from errors import SearchError
from model_graph import check_batch, forward_f32
from models import ModelGraph, PrecisionConfig, SearchConfig, SearchResult, SensitivityProfile
from quant_engine import ModelQuantizer, forward_quantized
from utils import CalibrationMethod, SUPPORTED_PRECISIONS

logger = logging.getLogger(__name__)

PRECISIONS = np.array(SUPPORTED_PRECISIONS)
LOWER_STEP = {16: 8, 8: 4}
MAX_ORACLE_LAYERS = 8
INIT_ATTEMPTS = 100
STAGNATION_FRACTION = 0.2


def descriptor_fitness(quantized: np.ndarray, reference: np.ndarray) -> float:
    """-(1/L) * sum_i |Q(x_i) - M(x_i)|^2"""
    q = np.asarray(quantized, dtype=np.float64)
    m = np.asarray(reference, dtype=np.float64)
    if q.shape != m.shape or q.shape[0] == 0:
        raise SearchError(f"descriptor sets differ or are empty: {q.shape} vs {m.shape}")
    return float(-np.mean(np.sum((q - m) ** 2, axis=1)))


class FitnessEvaluator:
    """Fitness of precision configs against the f32 reference, cached per config.

    Activation scales are calibrated once on `calib`; fitness uses the
    first `fitness_samples` inputs (all of them when None).
    """

    def __init__(self, model: ModelGraph, calib, fitness_samples: Optional[int] = None,
                 threads: int = 1, method: CalibrationMethod = CalibrationMethod.MAXABS):
        if calib is None or len(calib) == 0:
            raise SearchError("fitness needs a non-empty calibration sample")
        batch = check_batch(model, calib)
        self.samples = batch if fitness_samples is None else batch[:fitness_samples]
        if self.samples.shape[0] == 0:
            raise SearchError("fitness sample size must be >= 1")
        self.threads = max(1, int(threads))
        self.quantizer = ModelQuantizer(model, batch, method)
        self.reference = forward_f32(model, self.samples)
        self.num_layers = len(model.quantizable_layers())
        self._cache: Dict[Tuple[int, ...], float] = {}
        self._lock = threading.Lock()

    def _compute(self, config: PrecisionConfig) -> float:
        qmodel = self.quantizer.quantize(config)
        return descriptor_fitness(forward_quantized(qmodel, self.samples), self.reference)

    def evaluate(self, config: PrecisionConfig) -> float:
        key = tuple(config.bits)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        value = self._compute(config)
        with self._lock:
            self._cache[key] = value
        logger.debug("fitness [%s] = %.6g", config, value)
        return value

    def evaluate_many(self, configs: Sequence[PrecisionConfig]) -> List[float]:
        if self.threads == 1 or len(configs) < 2:
            return [self.evaluate(c) for c in configs]
        # warm the shared activation scales before fanning out
        if any(b < 16 for c in configs for b in c.bits):
            self.quantizer.activation_params()
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(self.evaluate, configs))

    @property
    def cache_size(self) -> int:
        return len(self._cache)


def fitness(config: PrecisionConfig, model: ModelGraph, calib) -> float:
    return FitnessEvaluator(model, calib).evaluate(config)


def sensitivity_profile(model: ModelGraph, calib, evaluator: Optional[FitnessEvaluator] = None) -> SensitivityProfile:
    """sigma_i = -fitness(all-16 with layer i at 4 bits)"""
    evaluator = evaluator or FitnessEvaluator(model, calib)
    t = evaluator.num_layers
    probes = []
    for i in range(t):
        bits = [16] * t
        bits[i] = 4
        probes.append(PrecisionConfig(bits))
    scores = np.array([max(0.0, -f) for f in evaluator.evaluate_many(probes)], dtype=np.float64)
    logger.info("Sensitivity profile over %d layers: max %.4g at layer %d",
                t, scores.max() if t else 0.0, int(np.argmax(scores)) if t else -1)
    return SensitivityProfile(scores=scores)


def repair(bits: Iterable[int], profile: SensitivityProfile, budget: float) -> PrecisionConfig:
    """Lower the least-sensitive layer above 4 bits one step until mean <= budget"""
    bits = [int(b) for b in bits]
    scores = np.asarray(profile.scores, dtype=np.float64)
    while np.mean(bits) > budget:
        candidates = [i for i, b in enumerate(bits) if b > 4]
        if not candidates:
            raise SearchError(f"budget {budget} is below the minimum mean bit-width 4")
        i = min(candidates, key=lambda j: (scores[j], j))
        bits[i] = LOWER_STEP[bits[i]]
    return PrecisionConfig(bits)


def mutation_weights(sigma: float) -> np.ndarray:
    """Categorical over {4, 8, 16}: softmax of sigma * (bits - 4) / 12"""
    return softmax(sigma * (PRECISIONS - 4) / 12.0)


def mutate(config: PrecisionConfig, p_m: float, profile: SensitivityProfile, budget: float,
           rng: np.random.Generator) -> PrecisionConfig:
    bits = list(config.bits)
    if bits and rng.random() < p_m:
        i = int(rng.integers(len(bits)))
        bits[i] = int(PRECISIONS[rng.choice(len(PRECISIONS), p=mutation_weights(profile.scores[i]))])
    return repair(bits, profile, budget)


def crossover(x1: PrecisionConfig, x2: PrecisionConfig, rng: np.random.Generator,
              profile: Optional[SensitivityProfile] = None, budget: Optional[float] = None,
              cut: Optional[int] = None) -> PrecisionConfig:
    """Single-point crossover: x1[:k] ++ x2[k:] with k in [1, T-1]"""
    if len(x1) != len(x2):
        raise SearchError(f"crossover parents differ in length: {len(x1)} vs {len(x2)}")
    t = len(x1)
    if t < 2:
        child = list(x1.bits)
    else:
        k = int(rng.integers(1, t)) if cut is None else cut
        if not 1 <= k <= t - 1:
            raise SearchError(f"cut point {k} outside [1, {t - 1}]")
        child = list(x1.bits[:k]) + list(x2.bits[k:])
    if profile is not None and budget is not None:
        return repair(child, profile, budget)
    return PrecisionConfig(child)


def validate_search_config(cfg: SearchConfig) -> None:
    if not 2 <= cfg.tournament <= cfg.population:
        raise SearchError(f"tournament size C={cfg.tournament} must satisfy 2 <= C <= N={cfg.population}")
    if not 0 < cfg.mutation_rate <= 1:
        raise SearchError(f"mutation rate must be in (0, 1], got {cfg.mutation_rate}")
    if not 4 <= cfg.budget <= 16:
        raise SearchError(f"budget B must be in [4, 16], got {cfg.budget}")
    if cfg.generations < 1:
        raise SearchError(f"generation limit must be >= 1, got {cfg.generations}")
    if cfg.fitness_samples < 1:
        raise SearchError(f"fitness sample size must be >= 1, got {cfg.fitness_samples}")
    if cfg.threads < 1:
        raise SearchError(f"thread count must be >= 1, got {cfg.threads}")


def homogeneous_anchor(t: int, budget: float) -> PrecisionConfig:
    p = max(int(b) for b in PRECISIONS if b <= budget)
    return PrecisionConfig([p] * t)


def initial_population(t: int, cfg: SearchConfig, profile: SensitivityProfile,
                       rng: np.random.Generator) -> List[PrecisionConfig]:
    population = [homogeneous_anchor(t, cfg.budget)]
    while len(population) < cfg.population:
        for _ in range(INIT_ATTEMPTS):
            candidate = rng.choice(PRECISIONS, size=t)
            if candidate.mean() <= cfg.budget:
                break
        population.append(repair(candidate, profile, cfg.budget))
    return population


def run_search(model: ModelGraph, calib, cfg: SearchConfig,
               evaluator: Optional[FitnessEvaluator] = None,
               profile: Optional[SensitivityProfile] = None) -> SearchResult:
    """Steady-state GA.

    Each step samples a tournament of C members, breeds the two fittest,
    and the mutated offspring replaces the tournament's worst. Stops after
    G insertions or ceil(0.2 * G) insertions without improving the best.
    """
    validate_search_config(cfg)
    evaluator = evaluator or FitnessEvaluator(model, calib, cfg.fitness_samples, cfg.threads)
    profile = profile or sensitivity_profile(model, calib, evaluator)
    t = evaluator.num_layers
    if t == 0:
        raise SearchError("model has no quantizable layers")

    evaluated: List[PrecisionConfig] = []

    def score(configs: List[PrecisionConfig]) -> List[float]:
        for c in configs:
            if not c.is_feasible(cfg.budget):
                raise SearchError(f"infeasible candidate [{c}] reached evaluation")
        evaluated.extend(configs)
        return evaluator.evaluate_many(configs)

    population = initial_population(t, cfg, profile, np.random.default_rng([cfg.seed, 0]))
    scores = score(population)
    best_pos = int(np.argmax(scores))
    best, best_fitness = population[best_pos], scores[best_pos]

    trace: List[float] = []
    patience = math.ceil(STAGNATION_FRACTION * cfg.generations)
    stale = 0
    for step in range(cfg.generations):
        rng = np.random.default_rng([cfg.seed, step + 1])
        members = rng.choice(cfg.population, size=cfg.tournament, replace=False)
        ranked = sorted((int(j) for j in members), key=lambda j: (-scores[j], j))
        parent1, parent2, worst = ranked[0], ranked[1], ranked[-1]

        child = crossover(population[parent1], population[parent2], rng, profile, cfg.budget)
        child = mutate(child, cfg.mutation_rate, profile, cfg.budget, rng)
        child_fitness = score([child])[0]
        population[worst], scores[worst] = child, child_fitness

        if child_fitness > best_fitness:
            best, best_fitness, stale = child, child_fitness, 0
        else:
            stale += 1
        trace.append(best_fitness)
        logger.debug("step %d: child [%s] f=%.6g best=%.6g", step, child, child_fitness, best_fitness)
        if stale >= patience:
            logger.info("Search stagnated after %d steps", step + 1)
            break

    logger.info("Search best [%s] fitness %.6g (mean %.2f bits, %d distinct configs evaluated)",
                best, best_fitness, best.mean_bits, evaluator.cache_size)
    return SearchResult(best=best, best_fitness=best_fitness, trace=trace,
                        evaluated=evaluated, population=list(population))


def feasible_configs(t: int, budget: float) -> List[PrecisionConfig]:
    """Every config in {4, 8, 16}^t with mean <= budget, lexicographic order"""
    return [PrecisionConfig(bits) for bits in itertools.product(SUPPORTED_PRECISIONS, repeat=t)
            if np.mean(bits) <= budget]


def exhaustive_oracle(model: ModelGraph, calib, budget: float,
                      evaluator: Optional[FitnessEvaluator] = None,
                      fitness_samples: Optional[int] = None, threads: int = 1) -> SearchResult:
    """Best feasible config by enumeration; ties go to lower mean, then lexicographic"""
    evaluator = evaluator or FitnessEvaluator(model, calib, fitness_samples, threads)
    t = evaluator.num_layers
    if t > MAX_ORACLE_LAYERS:
        raise SearchError(f"exhaustive search supports at most {MAX_ORACLE_LAYERS} layers, model has {t}")
    candidates = feasible_configs(t, budget)
    if not candidates:
        raise SearchError(f"no feasible config for budget {budget}")
    scores = evaluator.evaluate_many(candidates)
    best_pos = min(range(len(candidates)),
                   key=lambda j: (-scores[j], candidates[j].mean_bits, candidates[j].bits))
    return SearchResult(best=candidates[best_pos], best_fitness=scores[best_pos], trace=[],
                        evaluated=candidates)
