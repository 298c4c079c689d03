"""Monte Carlo maximum likelihood for missing-data models.

The engine approximates an intractable observed-data likelihood by
importance sampling over simulated missing data, maximizes the resulting
Monte Carlo log likelihood, and quantifies both sampling and Monte Carlo
uncertainty through a sandwich covariance.  The Logit-Normal GLMM family,
exact quadrature/enumeration oracles, a simulation harness, and a CLI are
included.
"""

from .engine import (
    AllImpossibleError,
    MissingDataModel,
    MonteCarloSample,
    ObservedData,
    ParamLayout,
    ParamVector,
    draw_sample,
    log_marginal_mc,
    mc_hessian,
    mc_loglik,
    mc_loglik_fresh,
    mc_score,
    weights,
)
from .glmm import GlmmDesign, GlmmParams, as_model, influenza_design, mcculloch_design
from .infer import (
    InferenceReport,
    RidgeError,
    build_report,
    chi2_quantile,
    confidence_ellipse,
    ellipse_contains,
    estimate_J,
    estimate_V,
    estimate_W,
    sandwich_vcov,
    standard_errors,
)
from .optim import OptimOptions, OptResult, fit_mcmle, maximize, profile
from .oracle import QuadratureRule, exact_JVW, gauss_hermite, gh_loglik, gh_mle, kl_info
from .rng import GENERATOR_ID, RandomStream
from .study import (
    CoverageResult,
    convergence_experiment,
    coverage_study,
    generate_dataset,
    scheme_variance_compare,
)

__version__ = "0.1.0"
