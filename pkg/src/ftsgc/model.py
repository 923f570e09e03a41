"""Domain types for the multivariate FAR(1) model and its state-space form.

The latent state at time ``t`` stacks every series' curve on its evaluation
grid (series 0 first), so a state vector has ``sum(M_n)`` entries. A kernel
block ``psi^{n,m}`` maps series ``m`` at ``t-1`` to series ``n`` at ``t``
and is stored as the column-major vectorisation of a ``J_n x J_m``
coefficient matrix ``Theta`` with surface ``B_n @ Theta @ B_m.T``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import linalg

from . import grid as gridmod
from .errors import ShapeError
from .grid import BasisSet, EvaluationGrid

UNRESTRICTED = "unrestricted"
RESTRICTED = "restricted"
FULL = "full"


# --------------------------------------------------------------------------
# data


@dataclass
class FunctionalSample:
    """Curves observed on (subsets of) their evaluation grids.

    ``values[n]`` is a ``T x M_n`` array aligned with ``grid.points[n]``;
    NaN marks grid points not observed at that time.
    """

    grid: EvaluationGrid
    values: tuple[np.ndarray, ...]
    series_ids: tuple[str, ...] | None = None
    time_index: np.ndarray | None = None
    tau_original: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        self.values = tuple(np.asarray(v, dtype=float) for v in self.values)
        if len(self.values) != self.grid.n_series:
            raise ShapeError("one value array per series is required", operation="FunctionalSample")
        T = self.values[0].shape[0]
        for n, v in enumerate(self.values):
            if v.ndim != 2 or v.shape != (T, self.grid.sizes[n]):
                raise ShapeError(
                    f"series {n} values have shape {v.shape}, expected {(T, self.grid.sizes[n])}",
                    operation="FunctionalSample",
                )
        if self.series_ids is None:
            self.series_ids = tuple(f"s{n}" for n in range(self.grid.n_series))
        if self.time_index is None:
            self.time_index = np.arange(1, T + 1)
        if self.tau_original is None:
            self.tau_original = tuple(p.copy() for p in self.grid.points)
        self.stacked = np.hstack(self.values)
        mask = ~np.isnan(self.stacked)
        self.obs_index = [np.flatnonzero(row) for row in mask]
        # repeats[t]: time t observes the same points as time t-1
        self.repeats = [False] + [bool(np.array_equal(a, b)) for a, b in zip(self.obs_index[1:], self.obs_index[:-1])]

    @property
    def T(self) -> int:
        return self.stacked.shape[0]

    @property
    def K(self) -> int:
        return self.grid.n_series

    def observations(self, t: int) -> np.ndarray:
        return self.stacked[t, self.obs_index[t]]

    def incidence(self, t: int) -> np.ndarray:
        """Block-diagonal selector ``Z_t`` (``m_t x N``)."""
        idx = self.obs_index[t]
        z = np.zeros((idx.size, self.grid.state_dim))
        z[np.arange(idx.size), idx] = 1.0
        return z

    def n_observed(self, series: int) -> int:
        return int(np.sum(~np.isnan(self.values[series])))

    def head(self, T: int) -> "FunctionalSample":
        return FunctionalSample(self.grid, tuple(v[:T] for v in self.values), self.series_ids,
                                self.time_index[:T], self.tau_original)

    def select(self, series: Iterable[int]) -> "FunctionalSample":
        """Sample restricted to (and reordered by) ``series``."""
        idx = list(series)
        g = EvaluationGrid(
            tuple(self.grid.points[i] for i in idx),
            tuple(self.grid.weights[i] for i in idx),
            tuple(self.grid.kinds[i] for i in idx),
        )
        return FunctionalSample(
            g,
            tuple(self.values[i] for i in idx),
            tuple(self.series_ids[i] for i in idx),
            self.time_index,
            tuple(self.tau_original[i] for i in idx),
        )


# --------------------------------------------------------------------------
# hypotheses


@dataclass(frozen=True)
class ModelSpec:
    """Which kernel blocks are free.

    ``unrestricted``: own-lag blocks plus the response <- cause block.
    ``restricted``: own-lag blocks only. The cause <- response block is zero
    under both hypotheses. ``full`` frees every block (plain MFAR(1)).
    """

    hypothesis: str = UNRESTRICTED
    n_series: int = 2
    response: int = 0
    cause: int = 1
    lag_order: int = 1

    def __post_init__(self):
        if self.hypothesis not in (UNRESTRICTED, RESTRICTED, FULL):
            raise ValueError(f"unknown hypothesis {self.hypothesis!r}")
        if self.lag_order != 1:
            raise ValueError("only lag order 1 is supported")
        if self.n_series >= 2 and self.response == self.cause:
            raise ValueError("response and cause must differ")

    def free_blocks(self) -> tuple[tuple[int, int], ...]:
        K = self.n_series
        if self.hypothesis == FULL:
            return tuple((n, m) for n in range(K) for m in range(K))
        blocks = {(n, n) for n in range(K)}
        if self.hypothesis == UNRESTRICTED and K >= 2:
            blocks.add((self.response, self.cause))
        return tuple(sorted(blocks))

    def free_in_row(self, n: int) -> tuple[int, ...]:
        return tuple(m for (r, m) in self.free_blocks() if r == n)

    def with_hypothesis(self, hypothesis: str) -> "ModelSpec":
        return ModelSpec(hypothesis, self.n_series, self.response, self.cause, self.lag_order)


# --------------------------------------------------------------------------
# bases attached to a grid + hypothesis


@dataclass(frozen=True)
class Design:
    """Grid, hypothesis and every basis/penalty the sampler needs."""

    grid: EvaluationGrid
    spec: ModelSpec
    mean_bases: tuple[BasisSet, ...]
    loading_bases: tuple[BasisSet, ...]
    kernel_bases: tuple[BasisSet, ...]
    kernel_penalties: dict
    n_factors: tuple[int, ...]
    kappa: float = 1.0
    # (Q, R) per series with loading basis matrix B = Q R and diag(R) > 0
    loading_qr: tuple = ()

    @property
    def free_blocks(self):
        return self.spec.free_blocks()

    def omega(self, n: int, m: int) -> np.ndarray:
        omega2, omega0 = self.kernel_penalties[(n, m)]
        return omega2 + self.kappa * omega0

    def block_size(self, n: int, m: int) -> int:
        return self.kernel_bases[n].size * self.kernel_bases[m].size


def make_design(
    grid: EvaluationGrid,
    spec: ModelSpec | None = None,
    n_factors: int = 3,
    mean_basis_size: int | None = None,
    kernel_basis_size: int = 8,
    kappa: float = 1.0,
) -> Design:
    spec = spec or ModelSpec(n_series=grid.n_series)
    if spec.n_series != grid.n_series:
        raise ShapeError(f"spec has {spec.n_series} series, grid has {grid.n_series}",
                         operation="make_design")
    mean_b, load_b, kern_b, nfac = [], [], [], []
    for n in range(grid.n_series):
        pts = grid.points[n]
        if grid.kinds[n] == gridmod.VECTOR:
            ident = gridmod.identity_basis(pts)
            mean_b.append(ident)
            load_b.append(ident)
            kern_b.append(ident)
        else:
            J = mean_basis_size or gridmod.default_curve_basis_size(pts.size)
            J = min(J, pts.size)
            tps = gridmod.thin_plate_basis(pts, J)
            mean_b.append(tps)
            load_b.append(tps)
            kern_b.append(gridmod.bspline_basis(pts, kernel_basis_size))
        nfac.append(int(min(n_factors, load_b[-1].size)))
    penalties = {}
    for (n, m) in spec.free_blocks():
        penalties[(n, m)] = gridmod.kernel_penalty(kern_b[n], kern_b[m])
    return Design(grid, spec, tuple(mean_b), tuple(load_b), tuple(kern_b), penalties,
                  tuple(nfac), float(kappa), tuple(_positive_qr(b.evaluation_matrix) for b in load_b))


def _positive_qr(B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Q, R = np.linalg.qr(B)
    s = np.where(np.diag(R) < 0, -1.0, 1.0)
    return Q * s, R * s[:, None]


# --------------------------------------------------------------------------
# parameters


@dataclass
class KernelBlock:
    """One kernel block: ``theta = scale * theta_tilde`` with prior precision ``smoothing * Omega``."""

    theta: np.ndarray
    scale: float = 1.0
    smoothing: float = 1.0

    @property
    def theta_tilde(self) -> np.ndarray:
        return self.theta / self.scale

    @property
    def smoothing_tilde(self) -> float:
        return self.smoothing * self.scale ** 2


@dataclass
class KernelParams:
    blocks: dict
    kappa: float = 1.0


@dataclass
class InnovationParams:
    """Factor decomposition of one series' innovation: ``eps_t = B_phi Xi e_t + eta_t``.

    The loading curves ``Phi = B_phi Xi`` are orthonormal on the grid
    (``Phi' Phi = I``), so with ``B_phi = Q R`` the frame ``V = R Xi`` has
    orthonormal columns.
    """

    loadings: np.ndarray
    factors: np.ndarray
    factor_variances: np.ndarray
    error_variance: float


@dataclass
class ParameterState:
    mean_coeffs: list
    mean_smoothing: list
    obs_variances: np.ndarray
    kernel: KernelParams
    innovation: list
    latent_states: np.ndarray

    def copy(self) -> "ParameterState":
        return copy.deepcopy(self)


def mean_curves(state: ParameterState, design: Design) -> np.ndarray:
    return np.concatenate([b.evaluation_matrix @ c for b, c in zip(design.mean_bases, state.mean_coeffs)])


def loading_curves(state: ParameterState, design: Design, n: int) -> np.ndarray:
    return design.loading_bases[n].evaluation_matrix @ state.innovation[n].loadings


def loading_frame(loadings: np.ndarray, design: Design, n: int) -> np.ndarray:
    """``V = R Xi``: the loading curves in the orthonormal basis ``Q``."""
    return design.loading_qr[n][1] @ loadings


def frame_loadings(frame: np.ndarray, design: Design, n: int) -> np.ndarray:
    """Inverse of :func:`loading_frame`."""
    return linalg.solve_triangular(design.loading_qr[n][1], frame, lower=False)


def trapezoid_factor(frame: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Lower-trapezoidal ``L`` (``p x J``, positive diagonal) with ``L L' = V diag(variances) V'``."""
    X = frame * np.sqrt(variances)
    _, R = np.linalg.qr(X.T)
    L = R.T
    s = np.where(np.diag(L) < 0, -1.0, 1.0)
    return L * s


def trapezoid_frame(L: np.ndarray, reference: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Frame and decreasing variances from the nonzero eigenpairs of ``L L'``.

    Eigenvector signs follow ``reference`` when given.
    """
    J = L.shape[1]
    lam, vec = np.linalg.eigh(L @ L.T)
    lam, vec = lam[::-1][:J], vec[:, ::-1][:, :J]
    if reference is not None:
        s = np.where(np.sum(vec * reference, axis=0) < 0, -1.0, 1.0)
        vec = vec * s
    return vec, lam


def trapezoid_mask(p: int, J: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the strictly lower entries of a ``p x J`` trapezoid, column-major."""
    rows, cols = [], []
    for c in range(J):
        for r in range(c + 1, p):
            rows.append(r)
            cols.append(c)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def innovation_cov(state: ParameterState, design: Design, n: int) -> np.ndarray:
    """``K_eps = Phi diag(sigma_j^2) Phi' + sigma_eta^2 I`` for series ``n``."""
    inn = state.innovation[n]
    phi = loading_curves(state, design, n)
    return (phi * inn.factor_variances) @ phi.T + inn.error_variance * np.eye(phi.shape[0])


def innovation_precision(state: ParameterState, design: Design, n: int) -> np.ndarray:
    """Inverse of :func:`innovation_cov` by the Woodbury identity."""
    inn = state.innovation[n]
    phi = loading_curves(state, design, n)
    s2 = inn.error_variance
    core = s2 / inn.factor_variances
    inner = np.diag(core) + phi.T @ phi
    return (np.eye(phi.shape[0]) - phi @ np.linalg.solve(inner, phi.T)) / s2


def kernel_surface(theta: np.ndarray, basis_tau: BasisSet, basis_u: BasisSet | None = None) -> np.ndarray:
    """Kernel values ``psi(tau_i, u_j)`` on the two grids."""
    basis_u = basis_u or basis_tau
    Jt, Ju = basis_tau.size, basis_u.size
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != Jt * Ju:
        raise ShapeError(f"kernel coefficients have length {theta.size}, expected {Jt * Ju}",
                         operation="kernel_surface")
    coef = theta.reshape((Jt, Ju), order="F")
    return basis_tau.evaluation_matrix @ coef @ basis_u.evaluation_matrix.T


def kernel_matrix(kernel: KernelParams, design: Design) -> np.ndarray:
    """The full block kernel ``psi`` on the stacked grid (zero where not free)."""
    g = design.grid
    psi = np.zeros((g.state_dim, g.state_dim))
    for (n, m), blk in kernel.blocks.items():
        psi[g.block(n), g.block(m)] = kernel_surface(blk.theta, design.kernel_bases[n], design.kernel_bases[m])
    return psi


@dataclass(frozen=True)
class DLM:
    """``y_t = Z_t mu + Z_t a_t + v_t``, ``a_t = transition a_{t-1} + eps_t``, ``a_1 ~ N(0, state_cov)``."""

    mean: np.ndarray
    transition: np.ndarray
    state_cov: np.ndarray
    obs_var: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.mean.size

    def obs_cov(self, sample: FunctionalSample, t: int) -> np.ndarray:
        return np.diag(self.obs_var[sample.obs_index[t]])


def assemble_dlm(state: ParameterState, design: Design) -> DLM:
    g = design.grid
    N = g.state_dim
    if state.latent_states.ndim != 2 or state.latent_states.shape[1] != N:
        raise ShapeError(f"latent states have shape {state.latent_states.shape}, expected (T, {N})",
                         operation="assemble_dlm")
    if len(state.mean_coeffs) != g.n_series or len(state.innovation) != g.n_series:
        raise ShapeError("per-series parameter lists do not match the grid", operation="assemble_dlm")
    for n, c in enumerate(state.mean_coeffs):
        if c.size != design.mean_bases[n].size:
            raise ShapeError(f"series {n} mean coefficients have length {c.size}", operation="assemble_dlm")
    for key, blk in state.kernel.blocks.items():
        if key not in design.kernel_penalties:
            raise ShapeError(f"kernel block {key} is not free under {design.spec.hypothesis}",
                             operation="assemble_dlm")
        if blk.theta.size != design.block_size(*key):
            raise ShapeError(f"kernel block {key} has length {blk.theta.size}", operation="assemble_dlm")
    transition = kernel_matrix(state.kernel, design) @ g.quadrature_matrix
    cov = np.zeros((N, N))
    for n in range(g.n_series):
        cov[g.block(n), g.block(n)] = innovation_cov(state, design, n)
    obs_var = np.concatenate([np.full(m, v) for m, v in zip(g.sizes, state.obs_variances)])
    return DLM(mean_curves(state, design), transition, cov, obs_var)


# --------------------------------------------------------------------------
# flat parameter vector


REAL, VARIANCE, POSITIVE, SMOOTHING = "real", "variance", "positive", "smoothing"


@dataclass(frozen=True)
class ThetaEntry:
    """One named run of the flat vector.

    A coefficient entry with ``scaled_by`` has prior precision proportional
    to that smoothing entry on the coordinates flagged in ``penalized``.
    """

    name: str
    start: int
    size: int
    kind: str
    scaled_by: str | None = None
    penalized: tuple | None = None

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


@dataclass(frozen=True)
class ThetaLayout:
    """Order and meaning of the flat parameter vector.

    ``variance`` entries are stored as variances but carry their prior on
    the precision scale. ``positive`` and ``smoothing`` entries carry their
    prior on their own scale.
    """

    entries: tuple[ThetaEntry, ...]

    @property
    def dim(self) -> int:
        last = self.entries[-1]
        return last.start + last.size

    def entry(self, name: str) -> ThetaEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_unconstrained(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map to unbounded coordinates with less curvature.

        Positive coordinates are log-transformed and the penalized
        coefficients of a scaled entry are multiplied by the square root of
        their smoothing parameter, which removes the funnel between them.
        Returns the transformed draws and the log-Jacobian that converts the
        prior density of the stored vector into a density over the
        transformed one.
        """
        theta = np.atleast_2d(theta)
        u = theta.copy()
        log_jac = np.zeros(theta.shape[0])
        for e in self.entries:
            if e.kind == VARIANCE:
                logs = np.log(theta[:, e.slice])
                u[:, e.slice] = logs
                # precision = exp(-log variance): |d prec / d log var| = 1 / var
                log_jac -= logs.sum(axis=1)
            elif e.kind in (POSITIVE, SMOOTHING):
                logs = np.log(theta[:, e.slice])
                u[:, e.slice] = logs
                log_jac += logs.sum(axis=1)
            if e.scaled_by is not None:
                lam = theta[:, self.entry(e.scaled_by).start]
                cols = np.arange(e.start, e.start + e.size)[np.asarray(e.penalized)]
                u[:, cols] *= np.sqrt(lam)[:, None]
                log_jac -= 0.5 * cols.size * np.log(lam)
        return u, log_jac


def theta_layout(design: Design) -> ThetaLayout:
    """Layout of the vector compared across hypotheses.

    Penalized coefficients are followed by their smoothing parameter, so
    the prior over the vector factorizes without integrals. Each series'
    factor part is the
    identified matrix ``V diag(sigma_j^2) V'`` through its trapezoidal
    Cholesky factor ``L``: diagonal first, then the strictly lower entries
    column by column.
    """
    entries = []
    pos = 0

    def add(name, size, kind, scaled_by=None, penalized=None):
        nonlocal pos
        entries.append(ThetaEntry(name, pos, int(size), kind, scaled_by, penalized))
        pos += int(size)

    K = design.grid.n_series
    for n in range(K):
        mask = design.mean_bases[n].penalized
        if mask.any():
            add(f"theta_mu[{n}]", mask.size, REAL, f"lambda_mu[{n}]", tuple(bool(x) for x in mask))
            add(f"lambda_mu[{n}]", 1, SMOOTHING)
        else:
            add(f"theta_mu[{n}]", mask.size, REAL)
        add(f"sigma2_nu[{n}]", 1, VARIANCE)
    for (n, m) in design.free_blocks:
        size = design.block_size(n, m)
        add(f"theta_psi[{n},{m}]", size, REAL, f"lambda_psi[{n},{m}]", (True,) * size)
        add(f"lambda_psi[{n},{m}]", 1, SMOOTHING)
    for n in range(K):
        J = design.n_factors[n]
        p = design.loading_bases[n].size
        add(f"L_diag[{n}]", J, POSITIVE)
        add(f"L_lower[{n}]", p * J - J * (J + 1) // 2, REAL)
        add(f"sigma2_eta[{n}]", 1, VARIANCE)
    return ThetaLayout(tuple(entries))


def theta_pack(state: ParameterState, design: Design) -> np.ndarray:
    """Flatten the parameters compared by the marginal-likelihood estimator.

    Latent states and factor scores are excluded (the Kalman likelihood
    integrates them out), as is the kernel parameter expansion.
    """
    parts = []
    K = design.grid.n_series
    for n in range(K):
        parts.append(state.mean_coeffs[n])
        if design.mean_bases[n].penalized.any():
            parts.append([state.mean_smoothing[n]])
        parts.append([state.obs_variances[n]])
    for key in design.free_blocks:
        blk = state.kernel.blocks[key]
        parts.append(blk.theta)
        parts.append([blk.smoothing])
    for n in range(K):
        inn = state.innovation[n]
        L = trapezoid_factor(loading_frame(inn.loadings, design, n), inn.factor_variances)
        parts.append(np.diag(L))
        parts.append(L[trapezoid_mask(*L.shape)])
        parts.append([inn.error_variance])
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def theta_unpack(theta: np.ndarray, design: Design, template: ParameterState) -> ParameterState:
    """Inverse of :func:`theta_pack`; latent quantities and kernel scales come from ``template``."""
    layout = theta_layout(design)
    theta = np.asarray(theta, dtype=float)
    if theta.size != layout.dim:
        raise ShapeError(f"theta has length {theta.size}, layout needs {layout.dim}", operation="theta_unpack")
    vals = {e.name: theta[e.slice] for e in layout.entries}
    state = template.copy()
    obs = state.obs_variances.copy()
    for n in range(design.grid.n_series):
        state.mean_coeffs[n] = vals[f"theta_mu[{n}]"].copy()
        if f"lambda_mu[{n}]" in vals:
            state.mean_smoothing[n] = float(vals[f"lambda_mu[{n}]"][0])
        obs[n] = vals[f"sigma2_nu[{n}]"][0]
        inn = state.innovation[n]
        J = design.n_factors[n]
        p = design.loading_bases[n].size
        L = np.zeros((p, J))
        L[np.arange(J), np.arange(J)] = vals[f"L_diag[{n}]"]
        L[trapezoid_mask(p, J)] = vals[f"L_lower[{n}]"]
        frame, inn.factor_variances = trapezoid_frame(L, loading_frame(inn.loadings, design, n))
        inn.loadings = frame_loadings(frame, design, n)
        inn.error_variance = float(vals[f"sigma2_eta[{n}]"][0])
    state.obs_variances = obs
    blocks = {}
    for key in design.free_blocks:
        old = template.kernel.blocks.get(key)
        scale = old.scale if old is not None else 1.0
        label = f"{key[0]},{key[1]}"
        blocks[key] = KernelBlock(vals[f"theta_psi[{label}]"].copy(), scale, float(vals[f"lambda_psi[{label}]"][0]))
    state.kernel = KernelParams(blocks, template.kernel.kappa)
    return state


# --------------------------------------------------------------------------
# JSON


def state_to_dict(state: ParameterState) -> dict:
    return {
        "theta_mu": [c.tolist() for c in state.mean_coeffs],
        "lambda_mu": [float(x) for x in state.mean_smoothing],
        "sigma2_nu": state.obs_variances.tolist(),
        "kernel": {
            "kappa": float(state.kernel.kappa),
            "blocks": [
                {"row": int(n), "col": int(m), "theta_psi": b.theta.tolist(),
                 "xi_psi": float(b.scale), "lambda_psi": float(b.smoothing)}
                for (n, m), b in sorted(state.kernel.blocks.items())
            ],
        },
        "innovation": [
            {"Xi": inn.loadings.tolist(), "e": inn.factors.tolist(),
             "sigma2_j": inn.factor_variances.tolist(), "sigma2_eta": float(inn.error_variance)}
            for inn in state.innovation
        ],
        "alpha": state.latent_states.tolist(),
    }


def state_from_dict(d: dict) -> ParameterState:
    blocks = {
        (b["row"], b["col"]): KernelBlock(np.array(b["theta_psi"], dtype=float), b["xi_psi"], b["lambda_psi"])
        for b in d["kernel"]["blocks"]
    }
    innovation = [
        InnovationParams(np.array(i["Xi"], dtype=float), np.array(i["e"], dtype=float),
                         np.array(i["sigma2_j"], dtype=float), i["sigma2_eta"])
        for i in d["innovation"]
    ]
    return ParameterState(
        [np.array(c, dtype=float) for c in d["theta_mu"]],
        list(d["lambda_mu"]),
        np.array(d["sigma2_nu"], dtype=float),
        KernelParams(blocks, d["kernel"]["kappa"]),
        innovation,
        np.array(d["alpha"], dtype=float),
    )


def dumps_state(state: ParameterState) -> str:
    return json.dumps(state_to_dict(state), sort_keys=True)


def loads_state(text: str) -> ParameterState:
    return state_from_dict(json.loads(text))
