"""Mean-field Gaussian variational Bayes for identity-covariance Gaussian mixtures."""

from ._accel import USE_NUMBA, backend_name
from .cavi import (
    FitResult,
    VariationalState,
    cavi_fit,
    cavi_update,
    elbo_closed_form,
    elbo_monte_carlo,
    mse,
)
from .diagnostics import (
    DiagGaussian,
    DiagnosticsReport,
    delta_n,
    kl_diag_gaussians,
    reference_gaussian,
    tail_mass_outside_ball,
    tv_monte_carlo,
    underdispersion_check,
)
from .errors import NumericalError, UsageError
from .model import (
    Dataset,
    GmmSpec,
    InformationMatrix,
    grad_variational_loglik,
    hessian_variational_loglik,
    information_matrix_mc,
    prop3_bounds_check,
    responsibilities,
    sample_dataset,
    variational_loglik,
)
from .numerics import (
    RngStream,
    SummaryStat,
    best_permutation_alignment,
    chi_square_survival,
    double_factorial,
    ks_statistic_vs_std_normal,
    log_sum_exp,
)

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "best_permutation_alignment",
    "cavi_fit",
    "cavi_update",
    "chi_square_survival",
    "Dataset",
    "delta_n",
    "DiagGaussian",
    "DiagnosticsReport",
    "double_factorial",
    "elbo_closed_form",
    "elbo_monte_carlo",
    "FitResult",
    "GmmSpec",
    "grad_variational_loglik",
    "hessian_variational_loglik",
    "information_matrix_mc",
    "InformationMatrix",
    "kl_diag_gaussians",
    "ks_statistic_vs_std_normal",
    "log_sum_exp",
    "mse",
    "NumericalError",
    "prop3_bounds_check",
    "reference_gaussian",
    "responsibilities",
    "RngStream",
    "sample_dataset",
    "SummaryStat",
    "tail_mass_outside_ball",
    "tv_monte_carlo",
    "underdispersion_check",
    "UsageError",
    "USE_NUMBA",
    "variational_loglik",
    "VariationalState",
]

