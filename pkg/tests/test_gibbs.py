import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special, stats

import blockchecks
from conftest import small_problem
from ftsgc import gibbs
from ftsgc.errors import SweepFailure
from ftsgc.model import RESTRICTED, KernelBlock, kernel_matrix, loading_curves, theta_pack, trapezoid_factor


@pytest.fixture(scope="module")
def problem():
    return small_problem(seed=1)


@pytest.mark.parametrize("name", sorted(blockchecks.BLOCKS))
def test_conditional_differs_from_joint_by_a_constant(problem, name):
    sample, design, state, _ = problem
    diffs = blockchecks.BLOCKS[name](state, sample, design, np.random.default_rng(7))
    assert blockchecks.spread(diffs) < 1e-6


@pytest.mark.parametrize("n", [0, 1])
def test_kernel_rows(problem, n):
    sample, design, state, _ = problem
    rng = np.random.default_rng(n)
    assert blockchecks.spread(blockchecks.kernel_theta(state, sample, design, rng, n=n)) < 1e-6
    assert blockchecks.spread(blockchecks.kernel_scale(state, sample, design, rng, n=n)) < 1e-6


def test_every_factor_precision_in_the_ordered_chain(problem):
    sample, design, state, _ = problem
    rng = np.random.default_rng(3)
    for j in range(design.n_factors[1]):
        diffs = blockchecks.factor_precision(state, sample, design, rng, n=1, j=j)
        assert blockchecks.spread(diffs) < 1e-6


def test_block_check_detects_a_wrong_conditional(problem):
    sample, design, state, _ = problem
    cond = gibbs.obs_precision_conditional(state, sample, design, 0)
    wrong = gibbs.GammaConditional(cond.shape + 3.0, cond.rate)
    rng = np.random.default_rng(0)
    diffs = []
    for _ in range(3):
        x = wrong.sample(rng)
        s = state.copy()
        s.obs_variances = np.array([1.0 / x, s.obs_variances[1]])
        diffs.append(wrong.logpdf(x) - blockchecks.joint(s, sample, design, True))
    assert blockchecks.spread(diffs) > 1e-3


def test_structural_zero_survives_sweeps():
    sample, design, state, rng = small_problem(hypothesis=RESTRICTED, warm=0)
    g = design.grid
    for _ in range(50):
        state = gibbs.sweep(state, sample, design, rng)
        assert (0, 1) not in state.kernel.blocks
        assert np.max(np.abs(kernel_matrix(state.kernel, design)[g.block(0), g.block(1)])) == 0.0


def test_factor_variances_stay_ordered():
    sample, design, state, rng = small_problem(n_factors=3, warm=0)
    for _ in range(30):
        state = gibbs.sweep(state, sample, design, rng)
        for inn in state.innovation:
            assert np.all(np.diff(inn.factor_variances) <= 0)


def test_chain_is_deterministic_given_seed():
    sample, design, _, _ = small_problem(warm=0)
    cfg = gibbs.GibbsConfig(iterations=8, burn_in=3, seed=11)
    a = gibbs.run_chain(sample, design, cfg)
    b = gibbs.run_chain(sample, design, cfg)
    np.testing.assert_array_equal(a.theta(), b.theta())
    assert a.loglik == b.loglik
    assert len(a) == 5


def test_split_run_continues_exactly():
    sample, design, _, _ = small_problem(warm=0)
    cfg = gibbs.GibbsConfig(iterations=10, burn_in=4, thin=2, seed=5)
    whole = gibbs.run_chain(sample, design, cfg)
    saved = {}

    def cb(i, st_, r, p):
        saved.update(state=st_, rng=r)
    rng = np.random.default_rng(cfg.seed)
    part = gibbs.run_chain(sample, design, cfg, rng=rng, stop=6, callback=cb)
    rest = gibbs.run_chain(sample, design, cfg, state=saved["state"], rng=saved["rng"], start=6, posterior=part)
    np.testing.assert_array_equal(whole.theta(), rest.theta())
    assert whole.iterations == rest.iterations == [4, 6, 8]


def test_sweep_failure_names_component(problem):
    sample, design, state, _ = problem
    bad = state.copy()
    bad.innovation[0].error_variance = float("nan")
    with pytest.raises(SweepFailure) as info:
        gibbs.sweep(bad, sample, design, np.random.default_rng(0))
    assert info.value.component


@pytest.mark.parametrize("kwargs", [{"iterations": 0}, {"iterations": 10, "burn_in": 10},
                                    {"thin": 0}, {"n_factors": 0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        gibbs.GibbsConfig(**kwargs)


def test_retained_count():
    assert gibbs.GibbsConfig(iterations=1000, burn_in=200, thin=3).n_retained == 266
    assert gibbs.GibbsConfig(iterations=10).burn_in_ == 5


class TestPriors:
    def test_smoothing_prior_is_a_density(self):
        # in u = log(lambda); the tail beyond e^60 carries mass 1e-4 * e^-30
        val, _ = integrate.quad(lambda u: math.exp(gibbs.smoothing_log_prior(math.exp(u)) + u),
                                math.log(1e-8) + 1e-12, 60.0, limit=400, epsabs=0, epsrel=1e-12)
        assert val == pytest.approx(1.0, rel=1e-9)
        assert gibbs.smoothing_log_prior(1e-9) == -math.inf

    def test_kernel_smoothing_prior_is_scaled_f11(self):
        for lam in [1e-8, 1e-6, 3.0]:
            ref = stats.f(1, 1).logpdf(1e6 * lam) + math.log(1e6)
            assert gibbs.kernel_smoothing_log_prior(lam) == pytest.approx(ref, rel=1e-10)

    def test_theta_prior_matches_joint_prior_outside_the_factor_block(self, problem):
        _, design, state, _ = problem
        s = state.copy()
        s.mean_smoothing = [x * 7 for x in s.mean_smoothing]
        s.mean_coeffs = [c * 1.3 for c in s.mean_coeffs]
        for key, blk in s.kernel.blocks.items():
            s.kernel.blocks[key] = KernelBlock(blk.theta * 0.8, blk.scale, blk.smoothing * 3)
        got = gibbs.theta_log_prior(s, design) - gibbs.theta_log_prior(state, design)
        assert got == pytest.approx(gibbs.log_prior(s, design) - gibbs.log_prior(state, design), abs=1e-9)

    def test_ordered_precision_support(self):
        assert gibbs.ordered_precisions_log_prior(np.array([2.0, 1.0])) == -math.inf
        assert np.isfinite(gibbs.ordered_precisions_log_prior(np.array([1.0, 2.0])))


def test_initialization_is_deterministic_and_finite():
    sample, design, _, _ = small_problem(warm=0)
    a = gibbs.initialize(sample, design)
    b = gibbs.initialize(sample, design)
    np.testing.assert_array_equal(theta_pack(a, design), theta_pack(b, design))
    assert np.isfinite(gibbs.log_likelihood(a, sample, design))
    assert np.isfinite(gibbs.theta_log_prior(a, design))


def test_initialization_with_missing_points():
    from conftest import small_sample
    from ftsgc.model import ModelSpec, make_design
    rng = np.random.default_rng(3)
    sample = small_sample(rng, T=8, M=6, missing=0.4)
    design = make_design(sample.grid, ModelSpec(), n_factors=2, kernel_basis_size=4)
    state = gibbs.initialize(sample, design)
    for _ in range(3):
        state = gibbs.sweep(state, sample, design, rng)
    assert np.isfinite(gibbs.log_likelihood(state, sample, design))


def test_loading_curves_stay_orthonormal():
    sample, design, state, rng = small_problem(warm=0)
    for _ in range(5):
        state = gibbs.sweep(state, sample, design, rng)
    for n in range(design.grid.n_series):
        phi = loading_curves(state, design, n)
        np.testing.assert_allclose(phi.T @ phi, np.eye(phi.shape[1]), atol=1e-10)


def _haar_weighted_mean(F, draws, rng):
    p, J = F.shape
    z = rng.standard_normal((draws, p, J))
    q, r = np.linalg.qr(z)
    V = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    logw = np.einsum("ij,nij->n", F, V)
    w = np.exp(logw - logw.max())
    return np.einsum("n,nij->ij", w / w.sum(), V)


@pytest.mark.parametrize("shape", [(3, 2), (2, 2), (4, 1)])
def test_frame_sampler_matches_weighted_uniform_frames(shape):
    rng = np.random.default_rng(11)
    F = rng.normal(scale=1.2, size=shape)
    cond = gibbs.FrameConditional(F)
    V = np.linalg.qr(rng.standard_normal(shape))[0]
    total = np.zeros(shape)
    n = 6000
    for _ in range(n):
        V = cond.sample(rng, V)
        total += V
    expected = _haar_weighted_mean(F, 200_000, np.random.default_rng(5))
    np.testing.assert_allclose(total / n, expected, atol=0.04)


def _gaussian_trapezoid_log_density(L):
    # X with iid N(0, 1) entries written as X = L O with O orthogonal
    p, J = L.shape
    out = -0.5 * p * J * math.log(2 * math.pi) - 0.5 * float(np.sum(L ** 2))
    out += float(np.sum((J - 1 - np.arange(J)) * np.log(np.diag(L)[:J])))
    return out + J * math.log(2) + 0.5 * J * J * math.log(math.pi) - float(special.multigammaln(0.5 * J, J))


def _wishart_eigen_log_density(lam, p):
    # decreasing eigenvalues of a J x J Wishart(p, I) matrix
    J = lam.size
    iu = np.triu_indices(J, 1)
    out = 0.5 * J * J * math.log(math.pi) - 0.5 * p * J * math.log(2.0)
    out -= float(special.multigammaln(0.5 * p, J) + special.multigammaln(0.5 * J, J))
    out += 0.5 * (p - J - 1) * float(np.sum(np.log(lam))) - 0.5 * float(lam.sum())
    return out + float(np.sum(np.log((lam[:, None] - lam[None, :])[iu])))


@given(st.integers(0, 10_000), st.sampled_from([(1, 1), (2, 1), (3, 2), (4, 2), (3, 3), (6, 4)]))
def test_trapezoid_density_reproduces_gaussian_case(seed, shape):
    p, J = shape
    rng = np.random.default_rng(seed)
    V = np.linalg.qr(rng.standard_normal((p, J)))[0]
    lam = np.sort(rng.uniform(0.2, 5.0, J))[::-1]
    L = trapezoid_factor(V, lam)
    got = gibbs.trapezoid_log_density(L, lam, _wishart_eigen_log_density(lam, p))
    assert got == pytest.approx(_gaussian_trapezoid_log_density(L), abs=1e-9)


def test_trapezoid_density_single_direction_in_the_plane():
    # L = sqrt(lam) (cos a, sin a) with a uniform on a half circle: density 2 p(lam) / pi
    L = np.array([[0.8], [-0.3]])
    lam = np.array([0.73])
    assert gibbs.trapezoid_log_density(L, lam, 0.0) == pytest.approx(math.log(2 / math.pi))


def test_error_variance_move_targets_the_marginal_posterior():
    # oracle: the two log error variances on a grid under the Kalman likelihood
    sample, design, state, rng = small_problem(seed=3, warm=5)
    grid = np.linspace(-9.0, 3.0, 121)

    def log_target(u0, u1):
        s = state.copy()
        s.innovation[0].error_variance = math.exp(u0)
        s.innovation[1].error_variance = math.exp(u1)
        return (gibbs.log_likelihood(s, sample, design) + gibbs.log_variance_log_prior(u0)
                + gibbs.log_variance_log_prior(u1))
    lt = np.array([[log_target(a, b) for b in grid] for a in grid])
    w = np.exp(lt - lt.max())
    w /= w.sum()
    expected = (w.sum(axis=1) @ grid, w.sum(axis=0) @ grid)
    s = state.copy()
    draws = []
    for i in range(6000):
        gibbs._update_error_variance_marginal(s, sample, design, rng)
        if i >= 500:
            draws.append([math.log(s.innovation[n].error_variance) for n in range(2)])
    draws = np.array(draws)
    sd = np.sqrt(np.array([w.sum(axis=1) @ grid ** 2, w.sum(axis=0) @ grid ** 2]) - np.array(expected) ** 2)
    np.testing.assert_allclose(draws.mean(axis=0), expected, atol=0.15 * sd.max() + 0.05)
