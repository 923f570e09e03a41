"""Marginal likelihood by the modified harmonic mean and Bayes-factor reports.

The weighting density ``h`` is a multivariate normal fitted to the
posterior draws and truncated to the ellipsoid
``(x - m)' V^{-1} (x - m) <= chi2_{d, p}``. Its normalizing constant is the
Gaussian mass of that ellipsoid, ``p``, known in closed form.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, stats

from ._linalg import LOG_2PI
from .errors import EvidenceFailure

REGION_PROB = 0.95
RIDGE = 1e-8
MIN_EFFECTIVE = 10
SATURATION = 1e308

NOT_WORTH = "not-worth-mention"
SUBSTANTIAL = "substantial"
STRONG = "strong"
DECISIVE = "decisive"
FAVORS_RESTRICTED = "favors-restricted"


@dataclass(frozen=True)
class TruncatedNormal:
    """Normal density restricted to a Mahalanobis ball around its mean."""

    mean: np.ndarray
    chol: np.ndarray
    radius2: float
    log_mass: float

    @property
    def dim(self) -> int:
        return self.mean.size

    def mahalanobis2(self, x: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(x) - self.mean
        z = linalg.solve_triangular(self.chol, d.T, lower=True, check_finite=False)
        return np.sum(z * z, axis=0)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        q = self.mahalanobis2(x)
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        out = -0.5 * (self.dim * LOG_2PI + logdet + q) - self.log_mass
        return np.where(q <= self.radius2, out, -np.inf)


def truncated_normal(mean, cov, prob: float | None = REGION_PROB, ridge: float = RIDGE) -> TruncatedNormal:
    """Build the weighting density.

    ``prob=None`` leaves the normal untruncated. ``cov`` is regularised by
    ``ridge * tr(cov) / d`` on the diagonal before factorisation.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = mean.size
    reg = cov + ridge * max(np.trace(cov) / d, 0.0) * np.eye(d)
    try:
        chol = linalg.cholesky(0.5 * (reg + reg.T), lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise EvidenceFailure(f"posterior covariance is singular after ridge: {exc}",
                              operation="truncated_normal_logpdf") from None
    if prob is None:
        return TruncatedNormal(mean, chol, math.inf, 0.0)
    return TruncatedNormal(mean, chol, float(stats.chi2.ppf(prob, d)), math.log(prob))


def truncated_normal_logpdf(theta, mean, cov, prob: float | None = REGION_PROB) -> np.ndarray:
    return truncated_normal(mean, cov, prob).logpdf(theta)


def sorted_logsumexp(a: np.ndarray) -> float:
    """logsumexp with the terms summed in ascending order, so results do not depend on draw order."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    if a.size == 0:
        return -math.inf
    top = a[-1]
    if not np.isfinite(top):
        return float(top)
    return float(top + math.log(math.fsum(np.exp(a - top))))


@dataclass
class MarginalEstimate:
    log_marginal: float
    n_draws: int
    n_in_region: int
    effective_draws: float
    dim: int
    warning: str = ""

    @property
    def in_region_fraction(self) -> float:
        return self.n_in_region / self.n_draws if self.n_draws else 0.0


def mhm_from_terms(log_h, loglik, logprior) -> MarginalEstimate:
    """``log p(y) = -log( S^{-1} sum_i h_i / (L_i p_i) )`` from per-draw log terms.

    Draws with ``h = 0`` contribute zero to the sum and still count in ``S``.
    """
    log_h = np.asarray(log_h, dtype=float)
    loglik = np.asarray(loglik, dtype=float)
    logprior = np.asarray(logprior, dtype=float)
    S = log_h.size
    if S == 0:
        raise EvidenceFailure("no posterior draws", operation="mhm_log_marginal")
    inside = np.isfinite(log_h)
    if not inside.any():
        raise EvidenceFailure("every draw lies outside the truncation region", operation="mhm_log_marginal")
    if not (np.all(np.isfinite(loglik[inside])) and np.all(np.isfinite(logprior[inside]))):
        raise EvidenceFailure("non-finite log-likelihood or log-prior inside the region",
                              operation="mhm_log_marginal")
    terms = log_h[inside] - loglik[inside] - logprior[inside]
    lse = sorted_logsumexp(terms)
    w = np.exp(np.sort(terms) - lse)
    ess = float(1.0 / np.sum(w * w))
    est = MarginalEstimate(-(lse - math.log(S)), S, int(inside.sum()), ess, 0)
    if ess < MIN_EFFECTIVE:
        est.warning = f"only {ess:.1f} effective draws in the harmonic-mean average"
        warnings.warn(est.warning, RuntimeWarning, stacklevel=2)
    return est


def mhm_log_marginal(draws, loglik, logprior, prob: float = REGION_PROB) -> MarginalEstimate:
    """MHM estimate from draws ``(S x d)`` and their cached log-likelihood and log-prior.

    ``logprior`` must be the prior density in the same coordinates as the
    draws.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise EvidenceFailure("need at least two draws to fit the weighting density", operation="mhm_log_marginal")
    h = truncated_normal(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)), prob)
    est = mhm_from_terms(h.logpdf(x), loglik, logprior)
    est.dim = x.shape[1]
    return est


def log_marginal(posterior, prob: float = REGION_PROB) -> MarginalEstimate:
    """MHM estimate for a :class:`ftsgc.gibbs.PosteriorSample`.

    Positive parameters are log-transformed before fitting ``h``; the prior
    is converted to those coordinates with the matching Jacobian.
    """
    from .model import theta_layout

    layout = theta_layout(posterior.design)
    u, log_jac = layout.to_unconstrained(posterior.theta())
    return mhm_log_marginal(u, np.asarray(posterior.loglik), np.asarray(posterior.logprior) + log_jac, prob)


def interpret(log_bf: float) -> str:
    """Evidence category for ``ln B_12`` on half-open intervals [0,1), [1,3), [3,5), [5, inf)."""
    if log_bf < 0:
        return FAVORS_RESTRICTED
    if log_bf < 1:
        return NOT_WORTH
    if log_bf < 3:
        return SUBSTANTIAL
    if log_bf < 5:
        return STRONG
    return DECISIVE


@dataclass
class EvidenceReport:
    log_marginal_unrestricted: float
    log_marginal_restricted: float
    log_bayes_factor: float
    bayes_factor: float
    category: str
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _diag(est: MarginalEstimate) -> dict:
    return {"n_draws": est.n_draws, "n_in_region": est.n_in_region,
            "in_region_fraction": est.in_region_fraction, "effective_draws": est.effective_draws,
            "dim": est.dim, "warning": est.warning}


def bayes_factor(unrestricted: MarginalEstimate, restricted: MarginalEstimate) -> EvidenceReport:
    lu, lr = unrestricted.log_marginal, restricted.log_marginal
    if not (math.isfinite(lu) and math.isfinite(lr)):
        raise EvidenceFailure("log marginal likelihoods must be finite", operation="bayes_factor")
    lb = lu - lr
    bf = math.exp(lb) if lb < math.log(SATURATION) else SATURATION
    return EvidenceReport(lu, lr, lb, bf, interpret(lb),
                          {"unrestricted": _diag(unrestricted), "restricted": _diag(restricted)})
