"""Two-block inference for Bayesian inversion: adaptive importance sampling
over nonlinear-model parameters with alternating ML covariance estimation,
sample recycling for full joint posterior inference over parameters and noise
covariance, plus layered-IS and MCMC baselines."""

from .atais import AtaisConfig, AtaisOutput, run_atais
from .core import (
    Dataset,
    ForwardModel,
    GaussianPrior,
    ImproperFlatPrior,
    LogPrior,
    RngStream,
    SampleStore,
    SPDMatrix,
    UniformBoxPrior,
    residuals,
    spd_from_matrix,
)
from .ilis import run_ilis
from .likelihood import (
    GAUSSIAN,
    NoiseFamily,
    gaussian_loglik,
    log_posterior_cond,
    ml_covariance,
    student_t,
    student_t_loglik,
)
from .minibatch import BatchPlan, gaussian_product, make_batch_plan, run_atais_minibatch
from .models import ExperimentSpec, experiment_spec, generate_synthetic
from .posterior import (
    WishartParams,
    choose_phi,
    conditional_reweight,
    credible_interval,
    joint_weights,
    marginal_likelihood,
    sample_wishart,
    select_nu,
    wishart_logpdf,
)

__version__ = "0.1.0"
