"""Grouped mixed logit with correlated random parameters and heterogeneity in means."""

from .halton import HaltonConfig, halton_draws
from .model import (
    ChoiceDataset,
    DimensionMismatch,
    IdentificationError,
    Layout,
    ModelSpec,
    NonFiniteUtility,
    Parameters,
    RandomTerm,
    SimulatedLikelihood,
    SpecError,
    mnl_probabilities,
    realize_coefficients,
    simulated_loglik,
)
from .diagnostics import (
    LRTest,
    NegativeStatistic,
    ZeroSigma,
    aic,
    correlation_matrix,
    covariance_from_cholesky,
    fit_metrics,
    lr_test,
    mcfadden_r2,
    null_loglik,
    sigma_from_cholesky,
    sigma_t_stat,
)
from .estimate import (
    EstimationOptions,
    EstimationResult,
    NonConvergence,
    SingularHessian,
    check_identification,
    maximize,
)
