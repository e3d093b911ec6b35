"""Semiparametric efficient estimation for homoscedastic regression models.

Fits ``Y = m(X; beta) + eps`` with an unknown error law by solving the
efficient-score estimating equations, plugging in a normal, Gumbel,
normal-mixture or kernel-density error model.
"""

from .errors import (
    ErrorModel,
    GumbelError,
    KernelDensityError,
    LeaveOneOutKernel,
    NormalError,
    NormalMixtureError,
    error_model_from_dict,
    fit_gumbel,
    fit_mixture,
    gumbel_error,
    kde_error,
    mixture_error,
    moment_t_squared,
    normal_error,
    silverman_bandwidth,
)
from .exceptions import (
    ConvergenceError,
    DimensionError,
    DomainError,
    EffregError,
    PreconditionError,
    SingularityError,
)
from .model import (
    Dataset,
    MeanModel,
    Theta,
    custom_model,
    exponential_model,
    least_squares_fit,
    linear_model,
    ols_fit,
    read_csv,
    residuals,
)
from .score import (
    ScoreContext,
    ScoreValue,
    efficiency_gap,
    efficient_score,
    efficient_score_type2,
    t_of_eps,
)
from .solver import (
    FitConfig,
    FitResult,
    confidence_intervals,
    covariance_bound,
    covariance_sandwich,
    solve_efficient,
)

__version__ = "0.1.0"
