"""Bayesian workflow engine for hierarchical negative-binomial defect models."""

from .dataio import (
    DataError,
    DataSummary,
    Dataset,
    Design,
    PreparedRow,
    RawRecord,
    Scenario,
    load_csv,
    prepare,
    quantile_scenario,
    summarize,
)
from .models import (
    ModelSpec,
    Params,
    PriorConfig,
    constrain,
    dim,
    linear_predictor,
    log_likelihood_pointwise,
    log_posterior_and_grad,
    log_prior,
    make_target,
    nb_logpmf,
    sample_prior,
    simulate_outcomes,
    unconstrain,
)

__version__ = "0.1.0"
