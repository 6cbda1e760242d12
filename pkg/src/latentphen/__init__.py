"""Bayesian latent-class phenotyping with Gibbs and variational backends."""

from .data import (
    CohortData,
    GaussianPrior,
    ParameterState,
    ParamLayout,
    PriorSpec,
    default_priors,
)
from .model import (
    class_posterior,
    class_posterior_all,
    expit,
    grad_log_joint,
    log_joint,
    log_lik_all,
    log_lik_patient,
    log_prior,
    sensitivity,
    specificity,
)
from .simulate import Covariate, SimulationConfig, default_scenario, simulate_cohort
from .draws import PosteriorDraws
from .gibbs import McmcConfig, McmcInitError, run_chains
from .advi import (
    AdviConfig,
    AdviDivergenceError,
    ElboTrace,
    VariationalState,
    elbo_estimate,
    elbo_gradient,
    fit,
    from_unconstrained,
    sample_posterior,
    to_unconstrained,
)
from .diagnostics import (
    ComparisonTable,
    PsisResult,
    SummaryReport,
    compare,
    psis_loo,
    rhat_ess,
    summarize,
    waic,
)

__version__ = "0.1.0"
