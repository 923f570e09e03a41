"""Small dense linear-algebra and sampling helpers shared by the samplers."""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg, special

JITTER = 1e-10
LOG_2PI = math.log(2.0 * math.pi)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def cholesky(a: np.ndarray, jitter: float = JITTER, tries: int = 5) -> np.ndarray:
    """Lower Cholesky factor of ``a``, retried with ``a + jitter * I`` on failure.

    The jitter grows by a factor of 100 on each further attempt. Raises
    ``numpy.linalg.LinAlgError`` once ``tries`` attempts are exhausted.
    """
    n = a.shape[0]
    eye = np.eye(n)
    try:
        return linalg.cholesky(a, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    j = jitter
    for _ in range(tries):
        try:
            return linalg.cholesky(a + j * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            j = max(j * 100.0, JITTER)
    if not np.all(np.isfinite(a)):
        raise np.linalg.LinAlgError("matrix has non-finite entries")
    raise np.linalg.LinAlgError("matrix is not positive definite after jitter")


class GaussianConditional:
    """Gaussian given in information form: precision ``Q`` and linear term ``b``.

    The mean is ``Q^{-1} b``. Draws use the Cholesky factor of ``Q`` so no
    explicit inverse is formed.
    """

    def __init__(self, precision: np.ndarray, linear: np.ndarray):
        self.precision = symmetrize(np.atleast_2d(precision))
        self.linear = np.atleast_1d(np.asarray(linear, dtype=float))
        self.chol = cholesky(self.precision)
        w = linalg.solve_triangular(self.chol, self.linear, lower=True, check_finite=False)
        self.mean = linalg.solve_triangular(self.chol.T, w, lower=False, check_finite=False)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return linalg.cho_solve((self.chol, True), np.eye(self.dim), check_finite=False)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.dim)
        return self.mean + linalg.solve_triangular(self.chol.T, z, lower=False, check_finite=False)

    def logpdf(self, x: np.ndarray) -> float:
        d = np.asarray(x, dtype=float).ravel() - self.mean
        quad = d @ self.precision @ d
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        return float(-0.5 * self.dim * LOG_2PI + 0.5 * logdet - 0.5 * quad)


class TruncatedGamma:
    """Gamma(shape, rate) restricted to ``(lower, upper)``; sampled by inverse CDF."""

    def __init__(self, shape: float, rate: float, lower: float = 0.0, upper: float = math.inf):
        if shape <= 0 or rate <= 0:
            raise ValueError(f"invalid gamma parameters shape={shape}, rate={rate}")
        if not lower < upper:
            raise ValueError(f"empty truncation interval ({lower}, {upper})")
        self.shape = float(shape)
        self.rate = float(rate)
        self.lower = float(lower)
        self.upper = float(upper)

    def _cdf(self, x: float) -> float:
        if x <= 0:
            return 0.0
        if math.isinf(x):
            return 1.0
        return float(special.gammainc(self.shape, self.rate * x))

    def _sf(self, x: float) -> float:
        if x <= 0:
            return 1.0
        if math.isinf(x):
            return 0.0
        return float(special.gammaincc(self.shape, self.rate * x))

    def log_mass(self) -> float:
        lo_cdf = self._cdf(self.lower)
        if lo_cdf < 0.5:
            mass = self._cdf(self.upper) - lo_cdf
        else:
            mass = self._sf(self.lower) - self._sf(self.upper)
        return math.log(mass) if mass > 0 else -math.inf

    def sample(self, rng: np.random.Generator) -> float:
        u = rng.uniform()
        lo_cdf = self._cdf(self.lower)
        if lo_cdf < 0.5:
            hi_cdf = self._cdf(self.upper)
            p = lo_cdf + u * (hi_cdf - lo_cdf)
            x = special.gammaincinv(self.shape, p) / self.rate if p > 0 else self.lower
        else:
            # upper tail: invert the survival function to keep precision
            lo_sf, hi_sf = self._sf(self.lower), self._sf(self.upper)
            q = hi_sf + u * (lo_sf - hi_sf)
            x = special.gammainccinv(self.shape, q) / self.rate if q > 0 else self.lower
        x = float(x)
        if not self.lower < x < self.upper or not math.isfinite(x):
            # interval is narrower than the inverse-CDF resolution
            hi = self.upper if math.isfinite(self.upper) else self.lower * 2.0 + 1.0
            x = self.lower + u * (hi - self.lower)
        return x

    def logpdf(self, x: float) -> float:
        if not self.lower < x < self.upper:
            return -math.inf
        return float(
            self.shape * math.log(self.rate)
            - special.gammaln(self.shape)
            + (self.shape - 1.0) * math.log(x)
            - self.rate * x
            - self.log_mass()
        )


def gamma_logpdf(x: float, shape: float, rate: float) -> float:
    if x <= 0:
        return -math.inf
    return float(shape * math.log(rate) - special.gammaln(shape) + (shape - 1.0) * math.log(x) - rate * x)


def mvn_logpdf_precision(x: np.ndarray, precision: np.ndarray) -> float:
    """log N(x; 0, precision^{-1}) for a positive definite precision matrix."""
    chol = cholesky(precision, jitter=0.0)
    quad = float(x @ precision @ x)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * x.size * LOG_2PI + 0.5 * logdet - 0.5 * quad)
