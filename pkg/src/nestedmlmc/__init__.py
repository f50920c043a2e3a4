"""Multilevel Monte Carlo for nested expectations, with adaptive inner sampling."""

from __future__ import annotations

from .adaptive import AdaptiveConfig, AdaptiveOutcome, determine_inner_samples, target_samples
from .errors import (
    BelowSupport,
    BudgetExceeded,
    EmptySampleSet,
    IncompatibleLevelSizes,
    InsufficientLevels,
    MaxLevelExceeded,
    NestedMlmcError,
    NonconvergentBias,
)
from .estimators import (
    Coupling,
    InnerEstimate,
    LevelDiffSample,
    Payoff,
    heaviside,
    inner_estimate,
    level_diff_antithetic,
    level_diff_independent,
    nested_mc_estimate,
    positive_part,
)
from .mlmc import (
    LevelRecord,
    LevelRow,
    MlmcConfig,
    MlmcResult,
    Sampling,
    convergence_study,
    estimate,
    fit_rates,
    run_level,
    select_start_level,
)
from .model import ModelParams, ModelProblem, analytic_cdf, analytic_cvar, analytic_eta, l_eta_from_eta
from .problem import NestedProblem
from .rng import RngStream

__version__ = "0.1.0"
