"""Posterior sampling for the MFAR(1) dynamic linear model.

Each full conditional is exposed as a small distribution object with
``sample(rng)`` and ``logpdf(x)`` so that the sweep and the tests share one
definition. The sweep is a partially collapsed Gibbs sampler: the kernel and
latent-state updates integrate the factor scores out (they only see
``K_eps``), and the factor scores are redrawn right after the kernel update,
before anything that conditions on them.

Priors on precisions are Gamma(1e-3, 1e-3); smoothing parameters with a
``lambda^{-1/2} ~ Uniform(0, 1e4)`` prior have density proportional to
``lambda^{-3/2}`` on ``lambda > 1e-8``. Loading curves are orthonormal on
the grid with a uniform prior over orthonormal frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, special, stats

from . import statespace
from ._linalg import LOG_2PI, GaussianConditional, TruncatedGamma, cholesky, gamma_logpdf
from .errors import InitFailure, NumericalBreakdown, SweepFailure
from .grid import BasisSet
from .model import (
    Design,
    FunctionalSample,
    InnovationParams,
    KernelBlock,
    KernelParams,
    ParameterState,
    assemble_dlm,
    innovation_precision,
    kernel_matrix,
    frame_loadings,
    loading_curves,
    loading_frame,
    theta_pack,
    trapezoid_factor,
    theta_unpack,
)

GAMMA_A = 1e-3
FLAT_VAR = 1e8
SCALE_PRIOR_VAR = 1e6
SMOOTHING_FLOOR = 1e-8
LOG_KAPPA_VAR = 4.0
MH_STEP = 0.5


@dataclass(frozen=True)
class GibbsConfig:
    iterations: int = 1000
    burn_in: int | None = None
    thin: int = 1
    seed: int = 0
    n_factors: int = 3
    mean_basis_size: int | None = None
    kernel_basis_size: int = 8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.burn_in_ < self.iterations:
            raise ValueError("burn-in must satisfy 0 <= B < S")
        if self.thin < 1:
            raise ValueError("thinning must be at least 1")
        if self.n_factors < 1:
            raise ValueError("at least one factor is required")

    @property
    def burn_in_(self) -> int:
        return self.iterations // 2 if self.burn_in is None else self.burn_in

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burn_in_) // self.thin


# --------------------------------------------------------------------------
# prior pieces


def coef_prior_precision(basis: BasisSet, smoothing: float) -> np.ndarray:
    """Diagonal of ``Lambda^{-1}``: flat on unpenalized columns, ``smoothing`` elsewhere."""
    return np.where(basis.penalized, smoothing, 1.0 / FLAT_VAR)


def smoothing_log_prior(lam: float) -> float:
    """log density of ``lambda`` when ``lambda^{-1/2} ~ Uniform(0, 1e4)``."""
    if not lam > SMOOTHING_FLOOR:
        return -math.inf
    return math.log(0.5e-4) - 1.5 * math.log(lam)


def kernel_smoothing_log_prior(lam: float) -> float:
    """log density of ``lambda = lambda_tilde / zeta^2``.

    With ``lambda_tilde ~ Gamma(1/2, 1/2)`` and ``zeta ~ N(0, 1e6)`` the
    scaled ratio ``1e6 * lambda`` is F(1, 1) distributed.
    """
    if not lam > 0:
        return -math.inf
    x = SCALE_PRIOR_VAR * lam
    return math.log(SCALE_PRIOR_VAR) - math.log(math.pi) - 0.5 * math.log(x) - math.log1p(x)


def _normal_logpdf_diag(x: np.ndarray, precision: np.ndarray) -> float:
    return float(-0.5 * x.size * LOG_2PI + 0.5 * np.sum(np.log(precision)) - 0.5 * np.sum(precision * x * x))


def _logdet_psd(a: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(cholesky(a, jitter=0.0)))))


def ordered_precisions_log_prior(prec: np.ndarray) -> float:
    """Top precision Gamma(a, a); each lower one Uniform(0, next)."""
    if np.any(prec <= 0) or np.any(np.diff(prec) < 0):
        return -math.inf
    out = gamma_logpdf(prec[-1], GAMMA_A, GAMMA_A)
    return out - float(np.sum(np.log(prec[1:])))


def frame_log_volume(p: int, J: int) -> float:
    """log volume of the orthonormal ``p x J`` frames under the uniform measure."""
    return J * math.log(2.0) + 0.5 * p * J * math.log(math.pi) - float(special.multigammaln(0.5 * p, J))


def trapezoid_log_density(L: np.ndarray, variances: np.ndarray, log_variance_density: float) -> float:
    """log density of the trapezoidal factor ``L`` of ``V diag(variances) V'``.

    ``V`` is uniform over orthonormal ``p x J`` frames and independent of the
    decreasing ``variances``, whose joint log density is
    ``log_variance_density``. The result is a density over the free entries
    of ``L``.
    """
    p, J = L.shape
    lam = np.asarray(variances, dtype=float)
    gaps = lam[:, None] - lam[None, :]
    iu = np.triu_indices(J, 1)
    if np.any(gaps[iu] <= 0) or np.any(lam <= 0):
        return -math.inf
    out = log_variance_density + J * math.log(2.0) - 0.5 * p * J * math.log(math.pi)
    out += float(special.multigammaln(0.5 * p, J))
    out += float(np.sum((J - 1 - np.arange(J)) * np.log(np.diag(L)[:J])))
    out -= float(np.sum(np.log(gaps[iu])))
    out -= 0.5 * (p - J - 1) * float(np.sum(np.log(lam)))
    return out


def log_prior(state: ParameterState, design: Design, expanded: bool = False) -> float:
    """Log prior density of the parameters in :func:`ftsgc.model.theta_pack`.

    Variances are scored through their precisions, matching the sampler's
    coordinates. ``expanded=True`` scores kernel blocks in the expanded
    parametrization ``(theta_tilde, scale, smoothing_tilde)`` instead of
    ``(theta, smoothing)``. Returns ``-inf`` outside the support.
    """
    total = 0.0
    for n in range(design.grid.n_series):
        mb = design.mean_bases[n]
        lam = state.mean_smoothing[n]
        if mb.penalized.any():
            total += smoothing_log_prior(lam)
            if total == -math.inf:
                return total
        total += _normal_logpdf_diag(state.mean_coeffs[n], coef_prior_precision(mb, lam))
        v = state.obs_variances[n]
        if not v > 0:
            return -math.inf
        total += gamma_logpdf(1.0 / v, GAMMA_A, GAMMA_A)
    for key in design.free_blocks:
        blk = state.kernel.blocks[key]
        omega = design.omega(*key)
        if expanded:
            lt = blk.smoothing_tilde
            if not lt > 0:
                return -math.inf
            th = blk.theta_tilde
            total += (-0.5 * th.size * LOG_2PI + 0.5 * (th.size * math.log(lt) + _logdet_psd(omega))
                      - 0.5 * lt * float(th @ omega @ th))
            total += -0.5 * (LOG_2PI + math.log(SCALE_PRIOR_VAR)) - 0.5 * blk.scale ** 2 / SCALE_PRIOR_VAR
            total += gamma_logpdf(lt, 0.5, 0.5)
        else:
            lam = blk.smoothing
            if not lam > 0:
                return -math.inf
            th = blk.theta
            total += (-0.5 * th.size * LOG_2PI + 0.5 * (th.size * math.log(lam) + _logdet_psd(omega))
                      - 0.5 * lam * float(th @ omega @ th))
            total += kernel_smoothing_log_prior(lam)
    # log(kappa) ~ N(0, 4); kappa is held at its initial value
    log_kappa = math.log(state.kernel.kappa)
    total += -0.5 * (LOG_2PI + math.log(LOG_KAPPA_VAR)) - 0.5 * log_kappa ** 2 / LOG_KAPPA_VAR
    for n in range(design.grid.n_series):
        inn = state.innovation[n]
        if not inn.error_variance > 0 or np.any(inn.factor_variances <= 0):
            return -math.inf
        total += gamma_logpdf(1.0 / inn.error_variance, GAMMA_A, GAMMA_A)
        total += ordered_precisions_log_prior(1.0 / inn.factor_variances)
        if total == -math.inf:
            return total
        total -= frame_log_volume(*inn.loadings.shape)
    return float(total)


def theta_log_prior(state: ParameterState, design: Design) -> float:
    """Prior density of :func:`ftsgc.model.theta_pack`, the vector compared across hypotheses.

    Means, observation variances and kernels are scored as in
    :func:`log_prior`; each series' factor part is scored through the
    trapezoidal factor of ``V diag(sigma_j^2) V'``. Variances are scored
    through their precisions.
    """
    total = 0.0
    for n in range(design.grid.n_series):
        mb = design.mean_bases[n]
        lam = state.mean_smoothing[n]
        if mb.penalized.any():
            total += smoothing_log_prior(lam)
            if total == -math.inf:
                return total
        total += _normal_logpdf_diag(state.mean_coeffs[n], coef_prior_precision(mb, lam))
        v = state.obs_variances[n]
        if not v > 0:
            return -math.inf
        total += gamma_logpdf(1.0 / v, GAMMA_A, GAMMA_A)
    for key in design.free_blocks:
        blk = state.kernel.blocks[key]
        lam = blk.smoothing
        if not lam > 0:
            return -math.inf
        th = blk.theta
        omega = design.omega(*key)
        total += (-0.5 * th.size * LOG_2PI + 0.5 * (th.size * math.log(lam) + _logdet_psd(omega))
                  - 0.5 * lam * float(th @ omega @ th))
        total += kernel_smoothing_log_prior(lam)
    for n in range(design.grid.n_series):
        inn = state.innovation[n]
        if not inn.error_variance > 0 or np.any(inn.factor_variances <= 0):
            return -math.inf
        total += gamma_logpdf(1.0 / inn.error_variance, GAMMA_A, GAMMA_A)
        lam = inn.factor_variances
        # variance density from the precision chain: |d prec / d var| = var^-2
        log_lam = ordered_precisions_log_prior(1.0 / lam) - 2.0 * float(np.sum(np.log(lam)))
        if log_lam == -math.inf:
            return -math.inf
        L = trapezoid_factor(loading_frame(inn.loadings, design, n), lam)
        total += trapezoid_log_density(L, lam, log_lam)
    return float(total)


# --------------------------------------------------------------------------
# likelihood pieces


def innovations(state: ParameterState, design: Design) -> np.ndarray:
    """``eps_1 = alpha_1`` and ``eps_t = alpha_t - A alpha_{t-1}`` (``T x N``)."""
    alpha = state.latent_states
    A = kernel_matrix(state.kernel, design) @ design.grid.quadrature_matrix
    eps = alpha.copy()
    eps[1:] -= alpha[:-1] @ A.T
    return eps


def log_likelihood(state: ParameterState, sample: FunctionalSample, design: Design) -> float:
    """Kalman log-likelihood with latent states and factors integrated out."""
    return statespace.loglik(sample, assemble_dlm(state, design))


def log_complete(state: ParameterState, sample: FunctionalSample, design: Design,
                 collapse_factors: bool = False) -> float:
    """log p(y, alpha[, e] | parameters) with every latent quantity held at ``state``."""
    g = design.grid
    alpha = state.latent_states
    mu = np.concatenate([b.evaluation_matrix @ c for b, c in zip(design.mean_bases, state.mean_coeffs)])
    resid = sample.stacked - mu - alpha
    total = 0.0
    for n in range(g.n_series):
        r = resid[:, g.block(n)]
        r = r[~np.isnan(r)]
        v = state.obs_variances[n]
        total += -0.5 * r.size * (LOG_2PI + math.log(v)) - 0.5 * float(r @ r) / v
    eps = innovations(state, design)
    T = alpha.shape[0]
    for n in range(g.n_series):
        e_n = eps[:, g.block(n)]
        inn = state.innovation[n]
        if collapse_factors:
            prec = innovation_precision(state, design, n)
            _, logdet = np.linalg.slogdet(prec)
            total += -0.5 * T * (e_n.shape[1] * LOG_2PI - logdet) - 0.5 * float(np.sum((e_n @ prec) * e_n))
        else:
            phi = loading_curves(state, design, n)
            r = e_n - inn.factors @ phi.T
            s2 = inn.error_variance
            total += -0.5 * r.size * (LOG_2PI + math.log(s2)) - 0.5 * float(np.sum(r * r)) / s2
            sv = inn.factor_variances
            total += (-0.5 * T * (sv.size * LOG_2PI + np.sum(np.log(sv)))
                      - 0.5 * float(np.sum(inn.factors ** 2 / sv)))
    return float(total)


# --------------------------------------------------------------------------
# full conditionals


class RowGaussian:
    """Independent rows ``x_t ~ N(P^{-1} b_t, P^{-1})`` sharing one precision ``P``."""

    def __init__(self, precision: np.ndarray, linear_rows: np.ndarray):
        self.precision = 0.5 * (precision + precision.T)
        self.chol = cholesky(self.precision)
        self.mean = linalg.cho_solve((self.chol, True), linear_rows.T, check_finite=False).T

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.mean.shape)
        return self.mean + linalg.solve_triangular(self.chol.T, z.T, lower=False, check_finite=False).T

    def logpdf(self, x: np.ndarray) -> float:
        d = x - self.mean
        T, J = d.shape
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        return float(-0.5 * T * (J * LOG_2PI - logdet) - 0.5 * np.sum((d @ self.precision) * d))


class GammaConditional(TruncatedGamma):
    """Truncated Gamma draw for a precision-like scalar."""


@dataclass
class KernelRowSystem:
    """Likelihood terms for the free blocks in kernel row ``n``.

    In the untilded coefficients ``theta`` (stacked over ``cols``) the
    Gaussian likelihood contributes precision ``precision`` and linear term
    ``linear``.
    """

    n: int
    cols: tuple[int, ...]
    sizes: tuple[int, ...]
    precision: np.ndarray
    linear: np.ndarray

    def slices(self):
        out, pos = [], 0
        for s in self.sizes:
            out.append(slice(pos, pos + s))
            pos += s
        return out


def kernel_row_system(state: ParameterState, design: Design, n: int) -> KernelRowSystem:
    g = design.grid
    cols = design.spec.free_in_row(n)
    alpha = state.latent_states
    Bn = design.kernel_bases[n].evaluation_matrix
    kinv = innovation_precision(state, design, n)
    H = Bn.T @ kinv @ Bn
    R = Bn.T @ kinv @ alpha[1:, g.block(n)].T
    G = [(alpha[:-1, g.block(m)] * g.weights[m]) @ design.kernel_bases[m].evaluation_matrix for m in cols]
    sizes = tuple(Bn.shape[1] * x.shape[1] for x in G)
    total = sum(sizes)
    P = np.zeros((total, total))
    lin = np.zeros(total)
    pos = [0]
    for s in sizes:
        pos.append(pos[-1] + s)
    for a, Ga in enumerate(G):
        lin[pos[a]:pos[a + 1]] = (R @ Ga).ravel(order="F")
        for b, Gb in enumerate(G):
            P[pos[a]:pos[a + 1], pos[b]:pos[b + 1]] = np.kron(Ga.T @ Gb, H)
    return KernelRowSystem(n, cols, sizes, P, lin)


def kernel_theta_conditional(state: ParameterState, design: Design, system: KernelRowSystem) -> GaussianConditional:
    """Conditional of the stacked ``theta_tilde`` for one kernel row."""
    blocks = [state.kernel.blocks[(system.n, m)] for m in system.cols]
    d = np.concatenate([np.full(s, b.scale) for s, b in zip(system.sizes, blocks)])
    prior = linalg.block_diag(*[b.smoothing_tilde * design.omega(system.n, m)
                                for m, b in zip(system.cols, blocks)])
    return GaussianConditional(prior + d[:, None] * system.precision * d[None, :], d * system.linear)


def kernel_scale_conditional(state: ParameterState, design: Design, system: KernelRowSystem) -> GaussianConditional:
    """Conditional of the per-block scales ``xi_tilde`` for one kernel row."""
    k = len(system.cols)
    E = np.zeros((system.linear.size, k))
    for a, (m, sl) in enumerate(zip(system.cols, system.slices())):
        E[sl, a] = state.kernel.blocks[(system.n, m)].theta_tilde
    return GaussianConditional(np.eye(k) / SCALE_PRIOR_VAR + E.T @ system.precision @ E, E.T @ system.linear)


def kernel_smoothing_conditional(block: KernelBlock, omega: np.ndarray) -> GammaConditional:
    """``lambda_tilde ~ Gamma(1/2 + d/2, 1/2 + theta_tilde' Omega theta_tilde / 2)``."""
    th = block.theta_tilde
    return GammaConditional(0.5 + 0.5 * th.size, 0.5 + 0.5 * float(th @ omega @ th))


def factor_conditional(state: ParameterState, design: Design, n: int, eps_n: np.ndarray) -> RowGaussian:
    inn = state.innovation[n]
    phi = loading_curves(state, design, n)
    s2 = inn.error_variance
    return RowGaussian(phi.T @ phi / s2 + np.diag(1.0 / inn.factor_variances), eps_n @ phi / s2)


def factor_precision_conditional(inn: InnovationParams, j: int) -> GammaConditional:
    """Conditional of ``sigma_j^{-2}`` inside the ordered chain (0-based ``j``)."""
    prec = 1.0 / inn.factor_variances
    J = prec.size
    T = inn.factors.shape[0]
    ss = float(np.sum(inn.factors[:, j] ** 2))
    lower = prec[j - 1] if j > 0 else 0.0
    # the Uniform(0, p_j) density of p_{j-1} contributes 1/p_j
    below = 1.0 if j > 0 else 0.0
    if j < J - 1:
        return GammaConditional(T / 2 + 1.0 - below, max(ss / 2, 1e-300), lower, prec[j + 1])
    return GammaConditional(GAMMA_A + T / 2 - below, GAMMA_A + ss / 2, lower)


def error_precision_conditional(state: ParameterState, design: Design, n: int, eps_n: np.ndarray) -> GammaConditional:
    inn = state.innovation[n]
    r = eps_n - inn.factors @ loading_curves(state, design, n).T
    return GammaConditional(GAMMA_A + r.size / 2, GAMMA_A + 0.5 * float(np.sum(r * r)))


def _log_i0(k: float) -> float:
    return math.log(special.i0e(k)) + k


class FrameConditional:
    """Matrix von Mises-Fisher law ``p(V) ~ exp(tr(F' V))`` on orthonormal ``p x J`` frames.

    There is no direct sampler, so :meth:`sample` applies one scan of exact
    sub-conditional moves from a current frame: each column given the others
    (a vector von Mises-Fisher law on the sphere orthogonal to them, when
    ``J < p``), then each pair of columns within its own plane (a draw from
    the Haar-weighted law over the rotations and reflections of that plane).
    """

    def __init__(self, F: np.ndarray):
        self.F = np.asarray(F, dtype=float)

    def log_kernel(self, V: np.ndarray) -> float:
        return float(np.sum(self.F * V))

    def _column(self, V, j, rng):
        p, J = V.shape
        N = np.eye(p) if J == 1 else linalg.null_space(np.delete(V, j, axis=1).T)
        c = N.T @ self.F[:, j]
        kappa = float(np.linalg.norm(c))
        if kappa > 0:
            z = stats.vonmises_fisher(c / kappa, kappa).rvs(random_state=rng).ravel()
        else:
            z = rng.standard_normal(c.size)
            z /= np.linalg.norm(z)
        V[:, j] = N @ z

    def _pair(self, V, i, j, rng):
        P = V[:, [i, j]]
        G = P.T @ self.F[:, [i, j]]
        # tr(G' W) for a rotation and a reflection by angle a: k cos(a - phase)
        rot = (G[0, 0] + G[1, 1], G[1, 0] - G[0, 1])
        ref = (G[0, 0] - G[1, 1], G[0, 1] + G[1, 0])
        k_rot, k_ref = math.hypot(*rot), math.hypot(*ref)
        w_rot = 1.0 / (1.0 + math.exp(_log_i0(k_ref) - _log_i0(k_rot)))
        if rng.random() < w_rot:
            a = rng.vonmises(math.atan2(rot[1], rot[0]), k_rot)
            W = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        else:
            a = rng.vonmises(math.atan2(ref[1], ref[0]), k_ref)
            W = np.array([[math.cos(a), math.sin(a)], [math.sin(a), -math.cos(a)]])
        V[:, [i, j]] = P @ W

    def sample(self, rng: np.random.Generator, V: np.ndarray) -> np.ndarray:
        V = np.array(V, dtype=float)
        p, J = V.shape
        if J < p:
            for j in range(J):
                self._column(V, j, rng)
        for i in range(J):
            for j in range(i + 1, J):
                self._pair(V, i, j, rng)
        return V


def frame_conditional(state: ParameterState, design: Design, n: int, eps_n: np.ndarray) -> FrameConditional:
    """Conditional of the orthonormal frame ``V = R Xi`` for series ``n``."""
    inn = state.innovation[n]
    Q = design.loading_qr[n][0]
    return FrameConditional(Q.T @ eps_n.T @ inn.factors / inn.error_variance)


def penalized_smoothing_conditional(coefs: np.ndarray, mask: np.ndarray) -> GammaConditional:
    """``lambda`` given coefficients under the ``lambda^{-3/2}`` prior on ``lambda > 1e-8``."""
    pen = coefs[mask]
    ss = float(pen @ pen)
    return GammaConditional(0.5 * (pen.size - 1), max(0.5 * ss, 1e-300), SMOOTHING_FLOOR)


def obs_precision_conditional(state: ParameterState, sample: FunctionalSample, design: Design, n: int) -> GammaConditional:
    sl = design.grid.block(n)
    mu = design.mean_bases[n].evaluation_matrix @ state.mean_coeffs[n]
    r = sample.stacked[:, sl] - mu - state.latent_states[:, sl]
    r = r[~np.isnan(r)]
    return GammaConditional(GAMMA_A + r.size / 2, GAMMA_A + 0.5 * float(r @ r))


def mean_conditional(state: ParameterState, sample: FunctionalSample, design: Design, n: int) -> GaussianConditional:
    sl = design.grid.block(n)
    mb = design.mean_bases[n]
    B = mb.evaluation_matrix
    r = sample.stacked[:, sl] - state.latent_states[:, sl]
    observed = ~np.isnan(r)
    counts = observed.sum(axis=0)
    sums = np.where(observed, r, 0.0).sum(axis=0)
    s2 = state.obs_variances[n]
    prec = np.diag(coef_prior_precision(mb, state.mean_smoothing[n])) + (B.T * counts) @ B / s2
    return GaussianConditional(prec, B.T @ sums / s2)


# --------------------------------------------------------------------------
# sweep


def _component(name: str):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except SweepFailure:
                raise
            except (np.linalg.LinAlgError, ValueError, NumericalBreakdown, FloatingPointError) as exc:
                raise SweepFailure(str(exc), component=name) from exc
        return inner
    return wrap


@_component("kernel")
def _update_kernel(state, design, rng):
    blocks = dict(state.kernel.blocks)
    for n in range(design.grid.n_series):
        system = kernel_row_system(state, design, n)
        if not system.cols:
            continue
        theta_t = kernel_theta_conditional(state, design, system).sample(rng)
        for m, sl in zip(system.cols, system.slices()):
            old = blocks[(n, m)]
            blocks[(n, m)] = KernelBlock(old.scale * theta_t[sl], old.scale, old.smoothing)
        state.kernel = KernelParams(blocks, state.kernel.kappa)
        scales = kernel_scale_conditional(state, design, system).sample(rng)
        for a, (m, sl) in enumerate(zip(system.cols, system.slices())):
            lt = blocks[(n, m)].smoothing_tilde
            s = float(scales[a])
            blocks[(n, m)] = KernelBlock(s * theta_t[sl], s, lt / s ** 2)
        state.kernel = KernelParams(blocks, state.kernel.kappa)
        for m in system.cols:
            blk = blocks[(n, m)]
            lt = kernel_smoothing_conditional(blk, design.omega(n, m)).sample(rng)
            blocks[(n, m)] = KernelBlock(blk.theta, blk.scale, lt / blk.scale ** 2)
        state.kernel = KernelParams(blocks, state.kernel.kappa)


@_component("fdlm")
def _update_fdlm(state, design, rng):
    eps = innovations(state, design)
    g = design.grid
    for n in range(g.n_series):
        eps_n = eps[:, g.block(n)]
        inn = state.innovation[n]
        inn.factors = factor_conditional(state, design, n, eps_n).sample(rng)
        for j in range(inn.factor_variances.size):
            inn.factor_variances = inn.factor_variances.copy()
            inn.factor_variances[j] = 1.0 / factor_precision_conditional(inn, j).sample(rng)
        inn.error_variance = 1.0 / error_precision_conditional(state, design, n, eps_n).sample(rng)
        frame = loading_frame(inn.loadings, design, n)
        frame = frame_conditional(state, design, n, eps_n).sample(rng, frame)
        inn.loadings = frame_loadings(frame, design, n)


@_component("observation")
def _update_obs(state, sample, design, rng):
    obs = state.obs_variances.copy()
    for n in range(design.grid.n_series):
        obs[n] = 1.0 / obs_precision_conditional(state, sample, design, n).sample(rng)
    state.obs_variances = obs


def log_variance_log_prior(u: float) -> float:
    """log density of ``u = log(variance)`` when the precision is Gamma(1e-3, 1e-3)."""
    return gamma_logpdf(math.exp(-u), GAMMA_A, GAMMA_A) - u


@_component("marginal-error-variance")
def _update_error_variance_marginal(state, sample, design, rng):
    """Random-walk Metropolis on each series' ``log sigma_eta^2``.

    The target integrates the latent states and factor scores out (Kalman
    likelihood). Given the states this variance is pinned by the part of the
    innovations outside the loading curves, which the states in turn inherit
    from it, so the Gibbs move alone barely mixes when it is small. Returns
    the filter of the final state for the state draw that follows.
    """
    current = statespace.kalman_filter(sample, assemble_dlm(state, design))
    for n in range(design.grid.n_series):
        inn = state.innovation[n]
        u = math.log(inn.error_variance)
        u_new = u + MH_STEP * rng.standard_normal()
        inn.error_variance = math.exp(u_new)
        try:
            proposal = statespace.kalman_filter(sample, assemble_dlm(state, design))
            log_ratio = (proposal.loglik + log_variance_log_prior(u_new)
                         - current.loglik - log_variance_log_prior(u))
        except NumericalBreakdown:
            log_ratio = -math.inf
        if math.log(rng.random()) < log_ratio:
            current = proposal
        else:
            inn.error_variance = math.exp(u)
    return current


@_component("states")
def _update_states(state, sample, design, rng, filtered=None):
    state.latent_states = statespace.ffbs(sample, assemble_dlm(state, design), rng, filtered)


@_component("mean")
def _update_mean(state, sample, design, rng):
    for n in range(design.grid.n_series):
        state.mean_coeffs[n] = mean_conditional(state, sample, design, n).sample(rng)
        mb = design.mean_bases[n]
        if mb.penalized.any():
            state.mean_smoothing[n] = penalized_smoothing_conditional(state.mean_coeffs[n], mb.penalized).sample(rng)


def sweep(state: ParameterState, sample: FunctionalSample, design: Design, rng: np.random.Generator) -> ParameterState:
    """One cycle: kernel, FDLM block, observation variances, marginal error-variance moves, states, mean.

    The marginal moves leave the factor scores stale; nothing conditions on
    them before the next FDLM block redraws them.
    """
    state = state.copy()
    _update_kernel(state, design, rng)
    _update_fdlm(state, design, rng)
    _update_obs(state, sample, design, rng)
    filtered = _update_error_variance_marginal(state, sample, design, rng)
    _update_states(state, sample, design, rng, filtered)
    _update_mean(state, sample, design, rng)
    return state


# --------------------------------------------------------------------------
# initialization


_LAMBDA_GRID = np.logspace(-6, 6, 25)


def _gcv_fit(Bs, ys, penalty, lambdas=_LAMBDA_GRID):
    """Penalized least-squares fits sharing one smoothing parameter chosen by pooled GCV."""
    best = None
    for lam in lambdas:
        rss = 0.0
        dof = 0.0
        n = 0
        fits = []
        for B, y in zip(Bs, ys):
            if y.size == 0:
                fits.append(np.zeros(B.shape[1]))
                continue
            A = B.T @ B + lam * penalty + 1e-10 * np.eye(B.shape[1])
            c = np.linalg.solve(A, B.T @ y)
            fits.append(c)
            r = y - B @ c
            rss += float(r @ r)
            dof += float(np.trace(np.linalg.solve(A, B.T @ B)))
            n += y.size
        denom = max(n - dof, 1e-8)
        score = n * rss / denom ** 2
        if best is None or score < best[0]:
            best = (score, lam, fits)
    return best[1], best[2]


def _smoothing_from_coefs(coefs: np.ndarray, mask: np.ndarray) -> float:
    pen = coefs[mask]
    if pen.size < 2:
        return 1.0
    ss = float(pen @ pen)
    return float(np.clip((pen.size - 1) / max(ss, 1e-12), 1e-6, 1e8))


def initialize(sample: FunctionalSample, design: Design) -> ParameterState:
    """Deterministic starting values from smoothing, ridge and SVD fits."""
    g = design.grid
    T = sample.T
    mean_coeffs, mean_smoothing, obs_var = [], [], []
    alpha = np.zeros((T, g.state_dim))
    for n in range(g.n_series):
        y = sample.values[n]
        mb = design.mean_bases[n]
        B = mb.evaluation_matrix
        with np.errstate(all="ignore"):
            ybar = np.nanmean(y, axis=0)
        seen = np.isfinite(ybar)
        if mb.penalized.any():
            _, (c,) = _gcv_fit([B[seen]], [ybar[seen]], mb.penalty)
        else:
            c = np.linalg.lstsq(B[seen], ybar[seen], rcond=None)[0]
        mean_coeffs.append(c)
        mean_smoothing.append(_smoothing_from_coefs(c, mb.penalized) if mb.penalized.any() else 1.0)
        mu = B @ c
        centered = y - mu
        obs_sets = [np.flatnonzero(~np.isnan(row)) for row in centered]
        if mb.penalized.any():
            _, fits = _gcv_fit([B[idx] for idx in obs_sets], [centered[t, idx] for t, idx in enumerate(obs_sets)],
                               mb.penalty)
            a_n = np.array([B @ f for f in fits])
        else:
            a_n = np.where(np.isnan(centered), 0.0, centered)
        alpha[:, g.block(n)] = a_n
        resid = centered - a_n
        resid = resid[~np.isnan(resid)]
        vals = y[~np.isnan(y)]
        floor = max(1e-6 * float(np.var(vals)) if vals.size else 0.0, 1e-10)
        obs_var.append(max(float(np.mean(resid ** 2)) if resid.size else floor, floor))

    # kernel: ridge fit with K_eps = I and unit smoothing
    blocks = {key: KernelBlock(np.zeros(design.block_size(*key)), 1.0, 1.0) for key in design.free_blocks}
    identity_innovation = [
        InnovationParams(np.zeros((design.loading_bases[n].size, design.n_factors[n])),
                         np.zeros((T, design.n_factors[n])), np.ones(design.n_factors[n]), 1.0)
        for n in range(g.n_series)
    ]
    probe = ParameterState(mean_coeffs, mean_smoothing, np.array(obs_var), KernelParams(blocks, design.kappa),
                           identity_innovation, alpha)
    if T > 1:
        for n in range(g.n_series):
            system = kernel_row_system(probe, design, n)
            if not system.cols:
                continue
            theta = kernel_theta_conditional(probe, design, system).mean
            for m, sl in zip(system.cols, system.slices()):
                blocks[(n, m)] = KernelBlock(theta[sl].copy(), 1.0, 1.0)
    probe.kernel = KernelParams(blocks, design.kappa)

    eps = innovations(probe, design)
    innovation = []
    for n in range(g.n_series):
        e_n = eps[:, g.block(n)]
        J = design.n_factors[n]
        Q = design.loading_qr[n][0]
        try:
            if not np.all(np.isfinite(e_n)):
                raise np.linalg.LinAlgError("innovations are not finite")
            _, _, vt = np.linalg.svd(e_n, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise InitFailure(f"SVD of series {n} innovations failed: {exc}", operation="initialize") from exc
        # leading directions projected onto the loading space, completed to an orthonormal frame
        k = min(J, vt.shape[0])
        lead = Q.T @ vt[:k].T
        frame = np.linalg.qr(np.hstack([lead, np.eye(Q.shape[1])]))[0][:, :J]
        phi = Q @ frame
        xi = frame_loadings(frame, design, n)
        factors = e_n @ phi
        total_var = float(np.mean(e_n ** 2)) if e_n.size else 1.0
        floor = max(1e-6 * total_var, 1e-10)
        fv = np.maximum(np.mean(factors ** 2, axis=0), floor)
        for j in range(1, J):
            fv[j] = min(fv[j], fv[j - 1] * (1.0 - 1e-6))
        r = e_n - factors @ phi.T
        s2 = max(float(np.mean(r ** 2)), floor)
        innovation.append(InnovationParams(xi, factors, fv, s2))
    probe.innovation = innovation
    return probe


# --------------------------------------------------------------------------
# chain


@dataclass
class PosteriorSample:
    """Retained draws in compact form.

    Each draw keeps its :func:`ftsgc.model.theta_pack` vector, the last
    latent state ``alpha_T`` (the forecast origin), the Kalman
    log-likelihood and the :func:`theta_log_prior` value. ``template`` is
    the most recent full state; it supplies the quantities not in the flat
    vector when a draw is unpacked.
    """

    design: Design
    thetas: list = field(default_factory=list)
    last_states: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    logprior: list = field(default_factory=list)
    template: ParameterState | None = None

    def __len__(self) -> int:
        return len(self.thetas)

    def theta(self) -> np.ndarray:
        return np.array(self.thetas)

    def append(self, state: ParameterState, iteration: int, loglik: float, logprior: float) -> None:
        self.thetas.append(theta_pack(state, self.design))
        self.last_states.append(state.latent_states[-1].copy())
        self.iterations.append(iteration)
        self.loglik.append(loglik)
        self.logprior.append(logprior)
        self.template = state

    def state(self, i: int) -> ParameterState:
        return theta_unpack(self.thetas[i], self.design, self.template)

    def dlm(self, i: int):
        return assemble_dlm(self.state(i), self.design)


def run_chain(
    sample: FunctionalSample,
    design: Design,
    config: GibbsConfig,
    state: ParameterState | None = None,
    rng: np.random.Generator | None = None,
    start: int = 0,
    posterior: PosteriorSample | None = None,
    stop: int | None = None,
    callback: Callable | None = None,
) -> PosteriorSample:
    """Run sweeps ``start .. stop-1`` (default: the whole chain).

    Passing the ``state``, ``rng``, ``start`` and ``posterior`` from an
    earlier partial run continues it exactly. ``callback(i, state, rng,
    posterior)`` is called after every sweep.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    state = state if state is not None else initialize(sample, design)
    posterior = posterior if posterior is not None else PosteriorSample(design)
    stop = config.iterations if stop is None else stop
    for i in range(start, stop):
        try:
            state = sweep(state, sample, design, rng)
        except SweepFailure as exc:
            raise SweepFailure(exc.detail, component=exc.component, iteration=i) from exc
        if i >= config.burn_in_ and (i - config.burn_in_) % config.thin == 0:
            posterior.append(state, i, log_likelihood(state, sample, design), theta_log_prior(state, design))
        if callback is not None:
            callback(i, state, rng, posterior)
    return posterior
