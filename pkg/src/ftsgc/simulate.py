"""Simulated MFAR(1) data and the replicate study harness.

Series 0 is ``Y`` and series 1 is ``X``; the causality test always asks
whether ``X`` helps predict ``Y``. Kernels are bimodal Gaussian surfaces
rescaled to a fixed squared L2 norm under the trapezoid rule on the grid.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import evidence, gibbs, statespace
from . import grid as gridmod
from .errors import DegenerateKernel, FtsgcError, ShapeError
from .model import RESTRICTED, UNRESTRICTED, FunctionalSample, ModelSpec, make_design

log = logging.getLogger(__name__)

BIMODAL_A = "bimodal-A"
BIMODAL_B = "bimodal-B"
CUSTOM_GRID = "custom-grid"

Y_ON_X = "Y-dep-on-X"
X_ON_Y = "X-dep-on-Y"
INDEPENDENT = "independent"
SCENARIOS = (Y_ON_X, X_ON_Y, INDEPENDENT)

MFAR, FAR = "MFAR", "FAR"

# (tau centre, u centre, tau width, u width, weight)
_BUMPS = {
    BIMODAL_A: ((0.2, 0.3, 0.3, 0.4, 0.75), (0.7, 0.8, 0.3, 0.4, 0.45)),
    BIMODAL_B: ((0.5, 0.3, 0.35, 0.35, 0.75), (0.75, 0.6, 0.35, 0.35, 0.45)),
}


@dataclass(frozen=True)
class KernelRecipe:
    """How to build one kernel surface.

    ``bumps`` overrides the preset bump parameters; ``surface`` is required
    for ``custom-grid`` and must match the grid it is built on.
    """

    kind: str = BIMODAL_A
    target_norm: float = 0.5
    bumps: tuple | None = None
    surface: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in (BIMODAL_A, BIMODAL_B, CUSTOM_GRID):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not 0 < self.target_norm < 1:
            raise ValueError("target squared norm must lie in (0, 1) for stationarity")
        if self.kind == CUSTOM_GRID and self.surface is None:
            raise ValueError("custom-grid recipes need a surface")


def _bimodal(points, bumps) -> np.ndarray:
    tau, u = np.meshgrid(points, points, indexing="ij")
    out = np.zeros_like(tau)
    for ct, cu, wt, wu, weight in bumps:
        out += weight / (math.pi * wt * wu) * np.exp(-((tau - ct) / wt) ** 2 - ((u - cu) / wu) ** 2)
    return out


def kernel_sq_norm(surface: np.ndarray, weights: np.ndarray) -> float:
    """Trapezoid approximation of the double integral of ``surface**2``."""
    return float(weights @ (surface ** 2) @ weights)


def build_kernel(recipe: KernelRecipe, points, weights=None) -> np.ndarray:
    """Kernel surface on ``points x points`` with squared norm ``recipe.target_norm``."""
    points = np.asarray(points, dtype=float)
    w = gridmod.trapezoid_weights(points) if weights is None else np.asarray(weights, dtype=float)
    if recipe.kind == CUSTOM_GRID:
        raw = np.asarray(recipe.surface, dtype=float)
        if raw.shape != (points.size, points.size):
            raise ShapeError(f"custom surface has shape {raw.shape}, grid needs {(points.size,) * 2}",
                             operation="build_kernel")
    else:
        raw = _bimodal(points, recipe.bumps or _BUMPS[recipe.kind])
    norm = kernel_sq_norm(raw, w)
    if not (np.isfinite(norm) and norm > 0):
        raise DegenerateKernel(f"kernel has squared norm {norm} before rescaling", operation="build_kernel")
    return raw * math.sqrt(recipe.target_norm / norm)


@dataclass(frozen=True)
class SimStudyConfig:
    scenario: str = Y_ON_X
    T: int = 100
    m: int = 30
    replicates: int = 20
    horizons: tuple = (1, 5)
    noise_sd: float = 0.2
    gp_length: float = 0.2
    gp_sd: float = 1.0
    warmup: int = 50
    test_size: int = 20
    forecast_draws: int = 50
    own_norm: float = 0.5
    cross_norm: float = 0.1
    seed: int = 0
    gibbs: gibbs.GibbsConfig = field(default_factory=lambda: gibbs.GibbsConfig(
        iterations=1000, burn_in=200, n_factors=6, mean_basis_size=6, kernel_basis_size=4))

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.T < 10:
            raise ValueError("T must be at least 10")
        if self.m < 3:
            raise ValueError("at least 3 grid points are needed")
        if not self.horizons or min(self.horizons) < 1:
            raise ValueError("horizons must be at least 1")
        if self.replicates < 1 or self.test_size < 0 or self.warmup < 0:
            raise ValueError("replicates must be positive; test size and warm-up non-negative")


@dataclass
class SimulatedData:
    """``sample`` holds the first ``T`` noisy curves; ``truth`` the noise-free curves for all ``T + test_size`` times."""

    sample: FunctionalSample
    full: FunctionalSample
    truth: np.ndarray
    kernels: dict


def scenario_kernels(config: SimStudyConfig, points, weights) -> dict:
    own = build_kernel(KernelRecipe(BIMODAL_A, config.own_norm), points, weights)
    blocks = {(0, 0): own, (1, 1): own}
    if config.scenario != INDEPENDENT:
        cross = build_kernel(KernelRecipe(BIMODAL_B, config.cross_norm), points, weights)
        blocks[(0, 1) if config.scenario == Y_ON_X else (1, 0)] = cross
    return blocks


def mean_functions(points) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * np.sin(2 * np.pi * points), 0.5 * np.cos(2 * np.pi * points)


def generate(config: SimStudyConfig, rng: np.random.Generator, kernels: dict | None = None,
             innovation_scale: float = 1.0, noise_scale: float = 1.0) -> SimulatedData:
    """Forward-simulate ``warmup + T + test_size`` steps and keep the last ``T + test_size``."""
    points = np.linspace(0.0, 1.0, config.m)
    g = gridmod.make_grid([points, points])
    w = g.weights[0]
    if kernels is None:
        kernels = scenario_kernels(config, points, w)
    M = config.m
    A = np.zeros((2 * M, 2 * M))
    for (n, k), surf in kernels.items():
        A[n * M:(n + 1) * M, k * M:(k + 1) * M] = surf * w[None, :]
    diff = points[:, None] - points[None, :]
    cov = config.gp_sd ** 2 * np.exp(-0.5 * (diff / config.gp_length) ** 2)
    L = np.linalg.cholesky(cov + 1e-8 * config.gp_sd ** 2 * np.eye(M))
    mu = np.concatenate(mean_functions(points))
    total = config.T + config.test_size
    alpha = np.zeros(2 * M)
    truth = np.empty((total, 2 * M))
    for t in range(config.warmup + total):
        eps = np.concatenate([L @ rng.standard_normal(M), L @ rng.standard_normal(M)])
        alpha = A @ alpha + innovation_scale * eps
        if t >= config.warmup:
            truth[t - config.warmup] = mu + alpha
    noisy = truth + noise_scale * config.noise_sd * rng.standard_normal(truth.shape)
    full = FunctionalSample(g, (noisy[:, :M], noisy[:, M:]), ("Y", "X"))
    return SimulatedData(full.head(config.T), full, truth, kernels)


def rmsfe(true_curves, forecasts) -> float:
    """Root mean squared error over every time and grid point."""
    a = np.asarray(true_curves, dtype=float)
    b = np.asarray(forecasts, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"truth has shape {a.shape}, forecasts {b.shape}", operation="rmsfe")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def posterior_predictions(posterior, full: FunctionalSample, horizons, n_draws: int) -> dict:
    """Rolling-origin predictions averaged over evenly spaced posterior draws."""
    idx = np.unique(np.linspace(0, len(posterior) - 1, min(n_draws, len(posterior))).round().astype(int))
    acc = {h: 0.0 for h in horizons}
    for i in idx:
        dlm = posterior.dlm(i)
        for h, p in statespace.predict_ahead(full, dlm, horizons).items():
            acc[h] = acc[h] + p
    return {h: v / idx.size for h, v in acc.items()}


def forecast_errors(data: SimulatedData, predictions: dict, T: int, series: int = 0) -> dict:
    """RMSFE of ``series`` over test targets ``T .. T + test_size - 1``."""
    g = data.full.grid
    block = g.block(series)
    total = data.truth.shape[0]
    out = {}
    for h, pred in predictions.items():
        origins = np.arange(T - h, total - h)
        if origins.size == 0:
            out[h] = math.nan
            continue
        out[h] = rmsfe(data.truth[origins + h][:, block], pred[origins][:, block])
    return out


@dataclass
class ReplicateResult:
    scenario: str
    replicate: int
    ln_bf: float = math.nan
    rmsfe: dict = field(default_factory=dict)
    error: str = ""


def replicate_seed(seed: int, scenario: str, replicate: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, SCENARIOS.index(scenario), replicate])


def run_replicate(config: SimStudyConfig, replicate: int) -> ReplicateResult:
    """Simulate one data set, fit both hypotheses and score them.

    The restricted fit has no cross kernel, so its forecasts of ``Y`` are
    those of a univariate FAR(1) model for ``Y``.
    """
    res = ReplicateResult(config.scenario, replicate)
    data_seq, chain_seq = replicate_seed(config.seed, config.scenario, replicate).spawn(2)
    try:
        data = generate(config, np.random.default_rng(data_seq))
        estimates, preds = {}, {}
        chain_seeds = chain_seq.spawn(2)
        for hyp, label, seq in ((UNRESTRICTED, MFAR, chain_seeds[0]), (RESTRICTED, FAR, chain_seeds[1])):
            g = config.gibbs
            design = make_design(data.sample.grid, ModelSpec(hyp), n_factors=g.n_factors,
                                 mean_basis_size=g.mean_basis_size, kernel_basis_size=g.kernel_basis_size)
            post = gibbs.run_chain(data.sample, design, g, rng=np.random.default_rng(seq))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                estimates[hyp] = evidence.log_marginal(post)
            if config.test_size > 0:
                preds[label] = posterior_predictions(post, data.full, config.horizons, config.forecast_draws)
        res.ln_bf = evidence.bayes_factor(estimates[UNRESTRICTED], estimates[RESTRICTED]).log_bayes_factor
        for label, p in preds.items():
            res.rmsfe[label] = forecast_errors(data, p, config.T)
    except FtsgcError as exc:
        res.error = str(exc)
        log.warning("replicate %d of %s failed: %s", replicate, config.scenario, exc)
    return res


@dataclass
class StudyResult:
    replicates: list

    def rmsfe_rows(self) -> list:
        rows = []
        for r in self.replicates:
            for model in sorted(r.rmsfe):
                for h in sorted(r.rmsfe[model]):
                    rows.append((r.scenario, model, h, r.replicate, r.rmsfe[model][h]))
        return rows

    def bayes_rows(self) -> list:
        return [(r.scenario, r.replicate, r.ln_bf, r.error) for r in self.replicates]

    def boxplot_rows(self) -> list:
        rows = []
        for scen in SCENARIOS:
            reps = [r for r in self.replicates if r.scenario == scen]
            if not reps:
                continue
            vals = np.array([r.ln_bf for r in reps if not r.error], dtype=float)
            failed = len(reps) - vals.size
            if vals.size:
                q = np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])
            else:
                q = [math.nan] * 5
            rows.append((scen, vals.size, failed, *[float(x) for x in q]))
        return rows


def replicate_study(config: SimStudyConfig, scenarios=None) -> StudyResult:
    """Run ``config.replicates`` replicates for each scenario (default: the configured one).

    Failed replicates are recorded with their error message and skipped in
    the summaries.
    """
    scenarios = (config.scenario,) if scenarios is None else tuple(scenarios)
    out = []
    for scen in scenarios:
        cfg = replace(config, scenario=scen)
        for r in range(config.replicates):
            out.append(run_replicate(cfg, r))
    return StudyResult(out)


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


RMSFE_HEADER = ("scenario", "model", "horizon", "replicate", "rmsfe")
BAYES_HEADER = ("scenario", "replicate", "ln_bf", "error")
BOXPLOT_HEADER = ("scenario", "n", "n_failed", "min", "q1", "median", "q3", "max")


def study_tables(result: StudyResult) -> dict:
    """CSV text for ``rmsfe.csv``, ``bayes.csv`` and ``boxplot.csv``."""
    return {
        "rmsfe.csv": _csv(RMSFE_HEADER, result.rmsfe_rows()),
        "bayes.csv": _csv(BAYES_HEADER, result.bayes_rows()),
        "boxplot.csv": _csv(BOXPLOT_HEADER, result.boxplot_rows()),
    }
