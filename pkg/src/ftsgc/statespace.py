"""Kalman filtering, simulation smoothing and forecasting for the DLM.

Observation rows at time ``t`` are the non-missing entries of the stacked
data row, so the incidence matrix never has to be formed: ``Z_t P`` is the
row subset ``P[idx]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ._linalg import LOG_2PI, cholesky, symmetrize
from .errors import NumericalBreakdown, ShapeError
from .model import DLM, FunctionalSample


STEADY_TOL = 1e-13


@dataclass
class FilterResult:
    """Per-time filter output; index ``t`` is 0-based.

    Covariances are lists of arrays. Once the filter reaches its steady
    state consecutive entries are the same array object, which lets the
    backward pass reuse its factorizations.
    """

    loglik: float
    pred_mean: np.ndarray
    pred_cov: list
    filt_mean: np.ndarray
    filt_cov: list


def _check(sample: FunctionalSample, dlm: DLM):
    if sample.stacked.shape[1] != dlm.state_dim:
        raise ShapeError(f"data have {sample.stacked.shape[1]} grid points, DLM has {dlm.state_dim}",
                         operation="kalman_filter")


def kalman_filter(sample: FunctionalSample, dlm: DLM, store: bool = True,
                  steady_tol: float | None = STEADY_TOL) -> FilterResult:
    """Run the filter with ``a_1 ~ N(0, K_eps)`` and a Joseph-form update.

    When the predicted covariance stops changing (relative change below
    ``steady_tol``) and the observed rows repeat, the gain and covariances
    are frozen until the observation pattern changes. ``steady_tol=None``
    always runs the full recursion. With ``store=False`` only the
    log-likelihood is kept.
    """
    _check(sample, dlm)
    T, N = sample.T, dlm.state_dim
    A, W = dlm.transition, dlm.state_cov
    eye = np.eye(N)
    a_pred = np.zeros(N)
    P_pred = symmetrize(W)
    pm, fm = np.empty((T, N)), np.empty((T, N))
    pc, fc = [], []
    centered = sample.stacked - dlm.mean
    total = 0.0
    steady = False
    prev_P = None
    for t in range(T):
        if t > 0:
            a_pred = A @ a_filt
            if not steady:
                P_pred = symmetrize(A @ P_filt @ A.T + W)
        idx = sample.obs_index[t]
        same = sample.repeats[t]
        if steady and not same:
            steady = False
        if idx.size == 0:
            a_filt, P_filt = a_pred, P_pred
        else:
            if not steady:
                r = dlm.obs_var[idx]
                PZ = P_pred[:, idx]
                F = symmetrize(PZ[idx, :]) + np.diag(r)
                try:
                    L = cholesky(F)
                except np.linalg.LinAlgError as exc:
                    raise NumericalBreakdown(f"innovation covariance not positive definite: {exc}",
                                             operation="kalman_filter", time=t) from None
                logdet = 2.0 * np.sum(np.log(np.diag(L)))
                # explicit inverse factor: the frozen steady state reuses it at every step
                L_inv = linalg.solve_triangular(L, np.eye(idx.size), lower=True, check_finite=False)
                gain = linalg.cho_solve((L, True), PZ.T, check_finite=False).T
                IKZ = eye.copy()
                IKZ[:, idx] -= gain
                P_filt = symmetrize(IKZ @ P_pred @ IKZ.T + (gain * r) @ gain.T)
                if steady_tol is not None and same and prev_P is not None:
                    scale = np.max(np.abs(P_pred))
                    steady = bool(np.max(np.abs(P_pred - prev_P)) <= steady_tol * scale)
            v = centered[t, idx] - a_pred[idx]
            Linv_v = L_inv @ v
            total += -0.5 * (idx.size * LOG_2PI + logdet + Linv_v @ Linv_v)
            a_filt = a_pred + gain @ v
        prev_P = P_pred
        pm[t], fm[t] = a_pred, a_filt
        if store:
            pc.append(P_pred)
            fc.append(P_filt)
    if not np.isfinite(total):
        raise NumericalBreakdown("log-likelihood is not finite", operation="kalman_filter", time=T - 1)
    return FilterResult(float(total), pm, pc, fm, fc)


def loglik(sample: FunctionalSample, dlm: DLM) -> float:
    return kalman_filter(sample, dlm, store=False).loglik


def ffbs(sample: FunctionalSample, dlm: DLM, rng: np.random.Generator,
         filtered: FilterResult | None = None) -> np.ndarray:
    """Draw ``alpha_{1:T}`` from its joint conditional given the data (``T x N``)."""
    f = filtered if filtered is not None else kalman_filter(sample, dlm)
    T, N = f.filt_mean.shape
    A = dlm.transition
    out = np.empty((T, N))
    cache_key, cache = None, None
    t = T - 1
    try:
        L = cholesky(f.filt_cov[-1])
        out[-1] = f.filt_mean[-1] + L @ rng.standard_normal(N)
        for t in range(T - 2, -1, -1):
            P, P_next = f.filt_cov[t], f.pred_cov[t + 1]
            key = (id(P), id(P_next))
            if key != cache_key:
                PA = P @ A.T
                J = linalg.cho_solve((cholesky(P_next), True), PA.T, check_finite=False).T
                cache = (J, cholesky(symmetrize(P - J @ PA.T)))
                cache_key = key
            J, Lc = cache
            mean = f.filt_mean[t] + J @ (out[t + 1] - f.pred_mean[t + 1])
            out[t] = mean + Lc @ rng.standard_normal(N)
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown(f"smoothing covariance not positive definite: {exc}",
                                 operation="ffbs", time=t) from None
    return out


def smoother_moments(sample: FunctionalSample, dlm: DLM) -> tuple[np.ndarray, np.ndarray]:
    """Rauch-Tung-Striebel means and marginal covariances of ``alpha_t``."""
    f = kalman_filter(sample, dlm)
    T, N = f.filt_mean.shape
    A = dlm.transition
    m, C = f.filt_mean.copy(), f.filt_cov.copy()
    for t in range(T - 2, -1, -1):
        Lp = cholesky(f.pred_cov[t + 1])
        J = linalg.cho_solve((Lp, True), (f.filt_cov[t] @ A.T).T, check_finite=False).T
        m[t] = f.filt_mean[t] + J @ (m[t + 1] - f.pred_mean[t + 1])
        C[t] = symmetrize(f.filt_cov[t] + J @ (C[t + 1] - f.pred_cov[t + 1]) @ J.T)
    return m, C


@dataclass
class Forecast:
    """Predictive curves ``h = 1..H`` ahead of the last observed time.

    ``draws`` holds one conditional-mean path per posterior draw (or one
    simulated path when an RNG was supplied).
    """

    mean: np.ndarray
    sd: np.ndarray
    draws: np.ndarray


def forecast(latest_states, dlms, horizon: int, rng: np.random.Generator | None = None) -> Forecast:
    """Iterate the evolution equation ``horizon`` steps from each draw's ``alpha_T``.

    ``latest_states`` and ``dlms`` are parallel sequences, one entry per
    posterior draw. The predictive sd combines the innovation variance
    accumulated over the horizon with the spread across draws.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    dlms = list(dlms)
    D, N = len(dlms), dlms[0].state_dim
    paths = np.empty((D, horizon, N))
    within = np.zeros((horizon, N))
    for d, (alpha, dlm) in enumerate(zip(latest_states, dlms)):
        a = np.asarray(alpha, dtype=float)
        cov = np.zeros((N, N))
        chol = cholesky(dlm.state_cov) if rng is not None else None
        for h in range(horizon):
            a = dlm.transition @ a
            if chol is not None:
                a = a + chol @ rng.standard_normal(N)
            cov = symmetrize(dlm.transition @ cov @ dlm.transition.T + dlm.state_cov)
            paths[d, h] = dlm.mean + a
            within[h] += np.diag(cov)
    mean = paths.mean(axis=0)
    if rng is None:
        var = within / D + paths.var(axis=0)
    else:
        var = paths.var(axis=0)
    return Forecast(mean, np.sqrt(var), paths)


def predict_ahead(sample: FunctionalSample, dlm: DLM, horizons) -> dict:
    """Rolling-origin point forecasts.

    Returns ``{h: P}`` where ``P[t]`` is the predicted curve at time
    ``t + h`` made from the filtered state at time ``t`` (0-based), for every
    origin ``t`` of ``sample``.
    """
    f = kalman_filter(sample, dlm)
    out = {}
    for h in horizons:
        a = f.filt_mean.T
        for _ in range(h):
            a = dlm.transition @ a
        out[h] = dlm.mean + a.T
    return out


__all__ = ["FilterResult", "kalman_filter", "loglik", "ffbs", "smoother_moments", "Forecast",
           "forecast", "predict_ahead"]
