import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ftsgc import gibbs
from ftsgc.errors import ShapeError
from ftsgc.model import (
    FULL, RESTRICTED, UNRESTRICTED, ModelSpec, assemble_dlm, dumps_state, innovation_cov,
    innovation_precision, kernel_surface, loads_state, make_design, theta_layout, theta_pack, theta_unpack,
)

from conftest import small_problem


class TestModelSpec:
    def test_free_blocks(self):
        assert ModelSpec(UNRESTRICTED).free_blocks() == ((0, 0), (0, 1), (1, 1))
        assert ModelSpec(RESTRICTED).free_blocks() == ((0, 0), (1, 1))
        assert len(ModelSpec(FULL, n_series=3).free_blocks()) == 9

    def test_reverse_direction(self):
        spec = ModelSpec(UNRESTRICTED, response=1, cause=0)
        assert (1, 0) in spec.free_blocks()
        assert (0, 1) not in spec.free_blocks()

    @pytest.mark.parametrize("kwargs", [{"hypothesis": "bogus"}, {"lag_order": 2}, {"response": 1, "cause": 1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ModelSpec(**kwargs)


@given(st.integers(0, 10_000), st.integers(4, 12), st.integers(1, 4))
def test_woodbury_precision_matches_dense_inverse(seed, M, J):
    rng = np.random.default_rng(seed)
    sample, design, state, _ = small_problem(seed % 7, M=max(M, 4), n_factors=J, warm=0)
    inn = state.innovation[0]
    inn.loadings = rng.normal(size=inn.loadings.shape)
    inn.factor_variances = rng.uniform(0.1, 3.0, size=inn.factor_variances.shape)
    inn.error_variance = float(rng.uniform(0.01, 1.0))
    K = innovation_cov(state, design, 0)
    P = innovation_precision(state, design, 0)
    np.testing.assert_allclose(P @ K, np.eye(K.shape[0]), atol=1e-8)


def test_kernel_surface_column_major_layout():
    sample, design, state, _ = small_problem(warm=0)
    b = design.kernel_bases[0]
    J = b.size
    theta = np.zeros(J * J)
    theta[1] = 1.0  # row 1, column 0 of Theta in column-major order
    expected = np.outer(b.evaluation_matrix[:, 1], b.evaluation_matrix[:, 0])
    np.testing.assert_allclose(kernel_surface(theta, b), expected)
    with pytest.raises(ShapeError):
        kernel_surface(np.zeros(J * J + 1), b)


def test_transition_applies_quadrature():
    sample, design, state, _ = small_problem()
    dlm = assemble_dlm(state, design)
    g = design.grid
    blk = state.kernel.blocks[(0, 1)]
    surf = kernel_surface(blk.theta, design.kernel_bases[0], design.kernel_bases[1])
    np.testing.assert_allclose(dlm.transition[g.block(0), g.block(1)], surf * g.weights[1][None, :])
    np.testing.assert_allclose(dlm.transition[g.block(1), g.block(0)], 0.0)


def test_assemble_rejects_blocks_outside_the_hypothesis():
    sample, design, state, _ = small_problem(hypothesis=RESTRICTED)
    state.kernel.blocks[(0, 1)] = state.kernel.blocks[(0, 0)]
    with pytest.raises(ShapeError):
        assemble_dlm(state, design)


@pytest.mark.parametrize("hyp", [UNRESTRICTED, RESTRICTED])
def test_theta_pack_unpack_round_trip(hyp):
    sample, design, state, _ = small_problem(hypothesis=hyp)
    layout = theta_layout(design)
    theta = theta_pack(state, design)
    assert theta.size == layout.dim
    back = theta_unpack(theta, design, state)
    again = theta_pack(back, design)
    # factor entries pass through an eigendecomposition; everything else is copied
    exact = np.ones(theta.size, dtype=bool)
    for e in layout.entries:
        if e.name.startswith("L_"):
            exact[e.slice] = False
    np.testing.assert_array_equal(again[exact], theta[exact])
    np.testing.assert_allclose(again, theta, rtol=1e-10, atol=1e-12)
    np.testing.assert_array_equal(assemble_dlm(back, design).transition, assemble_dlm(state, design).transition)
    np.testing.assert_allclose(assemble_dlm(back, design).state_cov, assemble_dlm(state, design).state_cov,
                               rtol=1e-10, atol=1e-12)
    with pytest.raises(ShapeError):
        theta_unpack(theta[:-1], design, state)


def test_layout_dimensions_differ_by_the_cross_block():
    _, du, _, _ = small_problem(hypothesis=UNRESTRICTED, warm=0)
    _, dr, _, _ = small_problem(hypothesis=RESTRICTED, warm=0)
    # the cross block and its smoothing parameter
    assert theta_layout(du).dim - theta_layout(dr).dim == du.block_size(0, 1) + 1


def test_unconstrained_jacobian_matches_finite_differences():
    _, design, state, _ = small_problem()
    layout = theta_layout(design)
    theta = theta_pack(state, design)
    u, lj = layout.to_unconstrained(theta)
    e = layout.entry("sigma2_eta[1]")
    assert u[0, e.start] == pytest.approx(np.log(theta[e.start]))
    # prior over precisions for variance entries: fold d(var)/d(prec) into the map
    prec_theta = theta.copy()
    var_cols = np.concatenate([np.arange(x.start, x.start + x.size) for x in layout.entries if x.kind == "variance"])
    prec_theta[var_cols] = 1.0 / theta[var_cols]

    def forward(p):
        t = p.copy()
        t[var_cols] = 1.0 / p[var_cols]
        return layout.to_unconstrained(t)[0][0]
    jac = np.empty((theta.size, theta.size))
    for i in range(theta.size):
        step = 1e-6 * max(1.0, abs(prec_theta[i]))
        hi, lo = prec_theta.copy(), prec_theta.copy()
        hi[i] += step
        lo[i] -= step
        jac[:, i] = (forward(hi) - forward(lo)) / (2 * step)
    _, logdet = np.linalg.slogdet(jac)
    assert lj[0] == pytest.approx(-logdet, abs=1e-5)


def test_factor_entries_count_identified_parameters():
    # p x J trapezoid: pJ minus the J(J-1)/2 rotation angles
    _, design, _, _ = small_problem(n_factors=2, warm=0)
    layout = theta_layout(design)
    p, J = design.loading_bases[0].size, design.n_factors[0]
    assert layout.entry("L_diag[0]").size + layout.entry("L_lower[0]").size == p * J - J * (J - 1) // 2


def test_state_json_round_trip():
    _, design, state, _ = small_problem()
    back = loads_state(dumps_state(state))
    assert dumps_state(back) == dumps_state(state)
    np.testing.assert_array_equal(assemble_dlm(back, design).state_cov, assemble_dlm(state, design).state_cov)


def test_vector_series_use_identity_bases():
    from ftsgc import grid as gridmod
    g = gridmod.make_grid([np.linspace(0, 1, 6), np.arange(2.0)], [gridmod.FUNCTIONAL, gridmod.VECTOR])
    d = make_design(g, ModelSpec(), n_factors=3, kernel_basis_size=4)
    np.testing.assert_array_equal(d.kernel_bases[1].evaluation_matrix, np.eye(2))
    assert d.n_factors == (3, 2)
    assert d.block_size(0, 1) == 8


def test_sample_repeats_flag():
    _, _, _, rng = small_problem(warm=0)
    from conftest import small_sample
    s = small_sample(rng, T=6, missing=0.3)
    for t in range(1, s.T):
        assert s.repeats[t] == np.array_equal(s.obs_index[t], s.obs_index[t - 1])


def test_posterior_state_reconstruction():
    sample, design, _, _ = small_problem(warm=0)
    post = gibbs.run_chain(sample, design, gibbs.GibbsConfig(iterations=6, burn_in=2, seed=3))
    st_ = post.state(len(post) - 1)
    assert gibbs.log_likelihood(st_, sample, design) == pytest.approx(post.loglik[-1], rel=1e-12)
