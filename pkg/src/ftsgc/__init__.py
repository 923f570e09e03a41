"""Bayesian multivariate functional autoregression and functional Granger causality.

Modules
-------
grid        evaluation grids, quadrature weights and spline bases
model       parameter containers and the state-space form of the model
statespace  Kalman filter, simulation smoother and forecasts
gibbs       priors, full conditionals and the Gibbs sampler
evidence    modified harmonic mean marginal likelihood and Bayes factors
simulate    simulated data and the replicate study harness
cli         the ``ftsgc`` command
"""

from .evidence import bayes_factor, interpret, log_marginal
from .gibbs import GibbsConfig, run_chain
from .grid import make_grid
from .model import FunctionalSample, ModelSpec, make_design

__all__ = [
    "FunctionalSample",
    "GibbsConfig",
    "ModelSpec",
    "bayes_factor",
    "interpret",
    "log_marginal",
    "make_design",
    "make_grid",
    "run_chain",
]

__version__ = "0.1.0"
