"""Independent reference computations used by the test-suite.

These build dense joint covariances or closed forms directly and share no
code with the package's recursive implementations.
"""

import numpy as np

from ftsgc import grid as gridmod
from ftsgc.model import DLM, FunctionalSample


def joint_state_cov(dlm: DLM, T: int) -> np.ndarray:
    """Covariance of the stacked ``alpha_{1:T}`` with ``alpha_1 ~ N(0, W)``."""
    N = dlm.state_dim
    A, W = dlm.transition, dlm.state_cov
    cov = np.zeros((T * N, T * N))
    marg = W.copy()
    for s in range(T):
        if s > 0:
            marg = A @ marg @ A.T + W
        block = marg
        for t in range(s, T):
            cov[t * N:(t + 1) * N, s * N:(s + 1) * N] = block
            cov[s * N:(s + 1) * N, t * N:(t + 1) * N] = block.T
            block = A @ block
    return cov


def _observed(sample: FunctionalSample, dlm: DLM):
    N = dlm.state_dim
    rows = np.concatenate([t * N + sample.obs_index[t] for t in range(sample.T)]).astype(int)
    y = np.concatenate([sample.observations(t) - dlm.mean[sample.obs_index[t]] for t in range(sample.T)])
    r = np.concatenate([dlm.obs_var[sample.obs_index[t]] for t in range(sample.T)])
    return rows, y, r


def dense_loglik(sample: FunctionalSample, dlm: DLM) -> float:
    cov = joint_state_cov(dlm, sample.T)
    rows, y, r = _observed(sample, dlm)
    S = cov[np.ix_(rows, rows)] + np.diag(r)
    _, logdet = np.linalg.slogdet(S)
    return float(-0.5 * (y.size * np.log(2 * np.pi) + logdet + y @ np.linalg.solve(S, y)))


def dense_smoother(sample: FunctionalSample, dlm: DLM):
    """Posterior mean (``T x N``) and covariance of stacked states by direct conditioning."""
    cov = joint_state_cov(dlm, sample.T)
    rows, y, r = _observed(sample, dlm)
    S = cov[np.ix_(rows, rows)] + np.diag(r)
    G = np.linalg.solve(S, cov[rows, :]).T
    return (G @ y).reshape(sample.T, dlm.state_dim), cov - G @ cov[rows, :]


def random_dlm(rng, sizes, stable=0.6):
    N = sum(sizes)
    A = rng.normal(size=(N, N))
    A *= stable / max(1e-12, np.max(np.abs(np.linalg.eigvals(A))))
    B = rng.normal(size=(N, N))
    W = B @ B.T / N + 0.1 * np.eye(N)
    return DLM(rng.normal(size=N), A, W, rng.uniform(0.05, 1.0, size=N))


def random_sample(rng, sizes, T, dlm=None, missing=0.0):
    pts = [np.linspace(0, 1, m) for m in sizes]
    kinds = [gridmod.FUNCTIONAL if m >= 3 else gridmod.VECTOR for m in sizes]
    g = gridmod.make_grid(pts, kinds)
    N = sum(sizes)
    y = rng.normal(size=(T, N))
    if missing > 0:
        mask = rng.uniform(size=(T, N)) < missing
        y[mask] = np.nan
    vals, off = [], 0
    for m in sizes:
        vals.append(y[:, off:off + m])
        off += m
    return FunctionalSample(g, tuple(vals))
