import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ftsgc import gibbs
from ftsgc import grid as gridmod
from ftsgc.model import FunctionalSample, ModelSpec, make_design

settings.register_profile("ftsgc", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ftsgc")


def small_sample(rng, T=5, M=4, K=2, missing=0.0):
    pts = [np.linspace(0.0, 1.0, M) for _ in range(K)]
    g = gridmod.make_grid(pts)
    vals = []
    for n in range(K):
        tau = pts[n]
        base = np.sin(2 * np.pi * (tau + 0.2 * n))
        v = base + 0.5 * rng.standard_normal((T, M))
        if missing:
            v[rng.uniform(size=v.shape) < missing] = np.nan
        vals.append(v)
    return FunctionalSample(g, tuple(vals))


def small_problem(seed=0, hypothesis="unrestricted", T=5, M=4, n_factors=2, warm=3):
    """Tiny sample, design and a state a few sweeps away from initialization."""
    rng = np.random.default_rng(seed)
    sample = small_sample(rng, T=T, M=M)
    design = make_design(sample.grid, ModelSpec(hypothesis), n_factors=n_factors, kernel_basis_size=4)
    state = gibbs.initialize(sample, design)
    for _ in range(warm):
        state = gibbs.sweep(state, sample, design, rng)
    return sample, design, state, rng


@pytest.fixture
def tiny():
    return small_problem()
