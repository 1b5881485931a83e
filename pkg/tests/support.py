import functools
from dataclasses import dataclass

import numpy as np

from drsls.blocks import lower_mask
from drsls.lti_model import InnovationModel
from drsls.sim_harness import (
    MonteCarloConfig,
    TrueSystem,
    generate_innovation_samples,
    reference_start,
    sample_nominal_model,
)
from drsls.sls_core import AffinePolicy

BENCHMARK_A = [[0.7326, -0.0861], [0.1722, 0.9909]]
BENCHMARK_B = [[0.0609], [0.0]]
BENCHMARK_C = [[0.0, 1.4142]]
BENCHMARK_L = [[0.1], [0.1]]


def scalar_model():
    return InnovationModel(A=0.5, B=1.0, C=1.0, D=0.0, L=0.25)


def benchmark_model():
    return InnovationModel(A=BENCHMARK_A, B=BENCHMARK_B, C=BENCHMARK_C, D=[[0.0]],
                           L=BENCHMARK_L)


def random_model(rng, n=None, m=None, q=None, with_d=True):
    n = n or int(rng.integers(1, 4))
    m = m or int(rng.integers(1, 4))
    q = q or int(rng.integers(1, 4))
    A = rng.normal(size=(n, n))
    A *= 0.9 / max(1e-9, np.abs(np.linalg.eigvals(A)).max())
    D = rng.normal(size=(q, m)) if with_d else np.zeros((q, m))
    return InnovationModel(A, rng.normal(size=(n, m)), rng.normal(size=(q, n)), D,
                           0.3 * rng.normal(size=(n, q)))


def random_policy(rng, T, m, q, scale=1.0):
    nb = T + 1
    mask = lower_mask(nb, m, q, strict=True)
    K = np.where(mask, scale * rng.normal(size=mask.shape), 0.0)
    return AffinePolicy(K, rng.normal(size=nb * m), T, m, q)


@dataclass(frozen=True, eq=False)
class Problem:
    sys: object
    start: object
    samples: object
    draw: object
    budget: object
    cost: object
    constraints: object
    T: int


@functools.lru_cache(maxsize=None)
def benchmark_problem(T=15, N=100, seed=7):
    """One seeded nominal draw of the benchmark setup (shared, read-only)."""
    cfg = MonteCarloConfig(TrueSystem.benchmark(), T=T, N=N, M=1, seed=seed)
    samples_ss, window_ss, draw_ss = np.random.SeedSequence(seed).spawn(3)
    samples, _ = generate_innovation_samples(cfg.system, T, cfg.tau, N,
                                             np.random.default_rng(samples_ss))
    start = reference_start(cfg.system, T, cfg.tau, np.random.default_rng(window_ss),
                            cfg.window_floor)
    draw = sample_nominal_model(cfg.system, cfg.budget, T, cfg.tau, start.window,
                                np.random.default_rng(draw_ss), cfg.perturbation_scale)
    return Problem(cfg.system, start, samples, draw, cfg.budget, cfg.cost(), cfg.constraints(), T)
