"""Evaluation grids, quadrature, incidence matrices and spline bases."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .errors import BadBasisOrder, GridTooSmall, InvalidGrid, PointNotOnGrid

MATCH_TOL = 1e-9

FUNCTIONAL = "functional"
VECTOR = "vector"


def trapezoid_weights(points: np.ndarray) -> np.ndarray:
    """Trapezoid weights on an increasing, possibly irregular, set of points."""
    x = np.asarray(points, dtype=float)
    gaps = np.diff(x)
    w = np.zeros_like(x)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    return w


@dataclass(frozen=True)
class EvaluationGrid:
    """Per-series evaluation points with their quadrature weights.

    Series are stacked in order, so series ``n`` occupies ``block(n)`` of
    every state vector. Vector-valued series (a handful of scalar
    covariates) carry unit weights, which turns the evolution integral into
    a plain sum over components.
    """

    points: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]
    kinds: tuple[str, ...]

    @property
    def n_series(self) -> int:
        return len(self.points)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(p.size for p in self.points)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    @property
    def state_dim(self) -> int:
        return int(sum(self.sizes))

    def block(self, n: int) -> slice:
        start = self.offsets[n]
        return slice(start, start + self.sizes[n])

    @property
    def quadrature_matrix(self) -> np.ndarray:
        # Block (n, m) of psi @ Q is psi^{n,m} @ diag(w_m): the integral over
        # u runs on the source series' grid, which the block-diagonal Q
        # delivers through the matrix product.
        return np.diag(np.concatenate(self.weights))

    def domain(self, n: int) -> tuple[float, float]:
        p = self.points[n]
        return float(p[0]), float(p[-1])


def make_grid(
    points: Sequence[Sequence[float]] | np.ndarray,
    kinds: Sequence[str] | None = None,
) -> EvaluationGrid:
    """Build an :class:`EvaluationGrid` from per-series abscissae.

    ``points`` is a list with one increasing array per series (a single
    1-D array is accepted for one series). Functional series need at least
    three points and get trapezoid weights; vector series get unit weights.
    """
    if isinstance(points, np.ndarray) and points.ndim == 1:
        points = [points]
    pts = [np.asarray(p, dtype=float).ravel() for p in points]
    if kinds is None:
        kinds = [FUNCTIONAL] * len(pts)
    if len(kinds) != len(pts):
        raise InvalidGrid("kinds and points differ in length", operation="make_grid")
    weights = []
    for n, (p, kind) in enumerate(zip(pts, kinds)):
        if kind not in (FUNCTIONAL, VECTOR):
            raise InvalidGrid(f"unknown series kind {kind!r}", operation="make_grid")
        if not np.all(np.isfinite(p)):
            raise InvalidGrid(f"series {n} has non-finite points", operation="make_grid")
        if kind == FUNCTIONAL and p.size < 3:
            raise GridTooSmall(f"series {n} has {p.size} points, need >= 3", operation="make_grid")
        if p.size < 1:
            raise GridTooSmall(f"series {n} is empty", operation="make_grid")
        if np.any(np.diff(p) <= 0):
            raise InvalidGrid(f"series {n} points are not strictly increasing", operation="make_grid")
        weights.append(trapezoid_weights(p) if kind == FUNCTIONAL else np.ones(p.size))
    return EvaluationGrid(tuple(pts), tuple(weights), tuple(kinds))


def match_points(grid_points: np.ndarray, observed: np.ndarray, tol: float = MATCH_TOL) -> np.ndarray:
    """Indices into ``grid_points`` of each observed abscissa."""
    g = np.asarray(grid_points, dtype=float)
    obs = np.atleast_1d(np.asarray(observed, dtype=float))
    pos = np.clip(np.searchsorted(g, obs), 0, g.size - 1)
    left = np.clip(pos - 1, 0, g.size - 1)
    pick = np.where(np.abs(g[left] - obs) < np.abs(g[pos] - obs), left, pos)
    bad = np.abs(g[pick] - obs) > tol
    if np.any(bad):
        raise PointNotOnGrid(
            f"observation point(s) {obs[bad][:5].tolist()} not on the grid (tol {tol})",
            operation="incidence",
        )
    return pick


def incidence(grid: EvaluationGrid, observed_points, series: int = 0) -> np.ndarray:
    """0/1 selector ``Z`` with ``Z @ f`` = values of grid function ``f`` at the observed points."""
    g = grid.points[series]
    idx = match_points(g, observed_points)
    z = np.zeros((idx.size, g.size))
    z[np.arange(idx.size), idx] = 1.0
    return z


# --------------------------------------------------------------------------
# bases


@dataclass(frozen=True)
class BasisSet:
    """Basis values on the grid together with a roughness penalty.

    ``penalty`` matches the coefficient space of the object the basis is
    used for: ``J x J`` for curves, ``J^2 x J^2`` for the tensor-product
    kernel basis. ``grams`` holds the 1-D Gram matrices of the basis and its
    first two derivatives, used to assemble kernel penalties between series.
    """

    kind: str
    evaluation_matrix: np.ndarray
    penalty: np.ndarray
    knots: np.ndarray
    grams: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
    omega2: np.ndarray | None = None
    omega0: np.ndarray | None = None
    kappa: float = 1.0

    @property
    def size(self) -> int:
        return self.evaluation_matrix.shape[1]

    @property
    def penalized(self) -> np.ndarray:
        """Mask of curve coefficients that carry the smoothing prior."""
        return np.diag(self.penalty) > 0.5 if self.penalty.shape[0] == self.size else np.zeros(self.size, bool)


def default_curve_basis_size(m: int) -> int:
    return int(min(m, max(4, min(15, int(np.ceil(m / 2))))))


def thin_plate_basis(grid_points, J: int) -> BasisSet:
    """Low-rank thin plate spline basis ``[1, tau, Z]`` with ``J`` columns.

    ``Z`` holds the cubic radial functions ``|tau - k|^3`` at ``J - 2``
    quantile knots, rotated by the inverse square root of the knot matrix so
    that the roughness penalty becomes the identity on those columns and is
    zero on the constant and linear columns.
    """
    x = np.asarray(grid_points, dtype=float).ravel()
    if J < 3 or J > x.size:
        raise BadBasisOrder(f"thin plate basis needs 3 <= J <= M, got J={J}, M={x.size}",
                            operation="thin_plate_basis")
    n_knots = J - 2
    probs = np.linspace(0.0, 1.0, n_knots + 2)[1:-1]
    knots = np.quantile(np.unique(x), probs)
    zk = np.abs(x[:, None] - knots[None, :]) ** 3
    if n_knots > 1:
        omega = np.abs(knots[:, None] - knots[None, :]) ** 3
        u, d, vt = linalg.svd(omega)
        sqrt_omega = (u * np.sqrt(d)) @ vt
        z = linalg.solve(sqrt_omega.T, zk.T).T
    else:
        z = zk
    basis = np.column_stack([np.ones_like(x), x, z])
    penalty = np.diag(np.r_[0.0, 0.0, np.ones(n_knots)])
    return BasisSet("thin-plate-low-rank", basis, penalty, knots)


def identity_basis(grid_points) -> BasisSet:
    """One coefficient per component, used for vector-valued series."""
    x = np.asarray(grid_points, dtype=float).ravel()
    m = x.size
    zero = np.zeros((m, m))
    return BasisSet("identity", np.eye(m), zero, np.empty(0), grams=(np.eye(m), zero, zero))


def _bspline_knot_vector(lo: float, hi: float, J: int, degree: int = 3) -> np.ndarray:
    interior = np.linspace(lo, hi, J - degree + 1)
    return np.r_[[lo] * degree, interior, [hi] * degree]


def _bspline_grams(t: np.ndarray, J: int, degree: int = 3) -> tuple[np.ndarray, ...]:
    spline = BSpline(t, np.eye(J), degree, extrapolate=False)
    nodes, wts = np.polynomial.legendre.leggauss(degree + 2)
    breaks = np.unique(t)
    grams = []
    for nu in range(3):
        g = np.zeros((J, J))
        for a, b in zip(breaks[:-1], breaks[1:]):
            xs = 0.5 * (b - a) * nodes + 0.5 * (a + b)
            vals = np.nan_to_num(spline(xs, nu=nu))
            g += (vals * (0.5 * (b - a) * wts)[:, None]).T @ vals
        grams.append(0.5 * (g + g.T))
    return tuple(grams)


def bspline_basis(grid_points, J: int) -> BasisSet:
    """1-D cubic B-spline basis with equally spaced knots on the grid's span."""
    x = np.asarray(grid_points, dtype=float).ravel()
    if J < 4:
        raise BadBasisOrder(f"cubic B-splines need J >= 4, got {J}", operation="bspline_tensor_basis")
    if J > x.size:
        raise BadBasisOrder(f"J={J} exceeds the grid resolution M={x.size}",
                            operation="bspline_tensor_basis")
    lo, hi = float(x[0]), float(x[-1])
    t = _bspline_knot_vector(lo, hi, J)
    design = BSpline.design_matrix(np.clip(x, lo, hi), t, 3).toarray()
    grams = _bspline_grams(t, J)
    return BasisSet("cubic-B-spline", design, grams[2], t[3:-3], grams=grams)


def kernel_penalty(basis_tau: BasisSet, basis_u: BasisSet) -> tuple[np.ndarray, np.ndarray]:
    """Roughness and size penalties for a kernel surface ``b(u) (x) b(tau)``.

    Returns ``(omega2, omega0)``. ``omega2`` is the thin-plate energy
    ``int int psi_tt^2 + 2 psi_tu^2 + psi_uu^2``; ``omega0`` is the Gram
    matrix ``int int psi^2`` of the tensor basis.
    """
    g0t, g1t, g2t = basis_tau.grams
    g0u, g1u, g2u = basis_u.grams
    omega2 = np.kron(g0u, g2t) + 2.0 * np.kron(g1u, g1t) + np.kron(g2u, g0t)
    omega0 = np.kron(g0u, g0t)
    return 0.5 * (omega2 + omega2.T), 0.5 * (omega0 + omega0.T)


def bspline_tensor_basis(grid_points, J_psi: int, kappa: float = 1.0) -> BasisSet:
    """Tensor-product cubic B-spline basis for a kernel surface on one grid.

    ``evaluation_matrix`` is the 1-D basis (``M x J``); the kernel surface is
    ``B @ Theta @ B.T`` with ``Theta`` the ``J x J`` coefficient matrix whose
    column-major vectorisation is the coefficient vector. The penalty is
    ``omega2 + kappa * omega0``.
    """
    one_d = bspline_basis(grid_points, J_psi)
    omega2, omega0 = kernel_penalty(one_d, one_d)
    return BasisSet(
        "cubic-B-spline",
        one_d.evaluation_matrix,
        omega2 + kappa * omega0,
        one_d.knots,
        grams=one_d.grams,
        omega2=omega2,
        omega0=omega0,
        kappa=kappa,
    )


def greville(basis: BasisSet, degree: int = 3) -> np.ndarray:
    """Greville abscissae: coefficients that reproduce ``f(tau) = tau``."""
    t = np.r_[[basis.knots[0]] * degree, basis.knots, [basis.knots[-1]] * degree]
    J = basis.size
    return np.array([t[j + 1:j + degree + 1].mean() for j in range(J)])
