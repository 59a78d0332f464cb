"""Linearized Laplace approximation with an exact NTK oracle and a trained
surrogate kernel for scalable, OOD-aware predictive uncertainty."""

from .data import Dataset, load_idx, make_blobs, make_ring_ood, make_two_moons, normalize
from .diff import finite_diff_jacobian, forward, forward_batch, jvp, jvp_batch, vjp, vjp_batch
from .likelihoods import GaussianLikelihood, SoftmaxLikelihood, softmax
from .lla import (
    GGNPrecision,
    PredictiveGaussian,
    curvature,
    fit_exact,
    fit_woodbury,
    ggn_precision,
    lla_kernel_direct,
    lla_kernel_woodbury,
    log_marginal_likelihood,
    ntk,
    ntk_gram,
    ntk_kernel_fn,
    predictive,
    tune_prior,
)
from .metrics import auc_roc, ece, gaussian_entropy, nll, softmax_entropy, softmax_probs_mc
from .models import (
    MapResult,
    OptimizerConfig,
    OracleScaleError,
    TrainingDivergedError,
    exact_jacobian,
    init_params,
    train_map,
)
from .network import (
    Conv2d,
    Dense,
    Flatten,
    NetworkSpec,
    ParamVector,
    Relu,
    ShapeError,
    TangentVector,
    Tanh,
    mlp_spec,
    param_layout,
)
from .sketch import estimator_variance_closed_form, kernel_estimate, sample_projection, sketch
from .surrogate import (
    BatchComposition,
    SurrogateConfig,
    SurrogateSpec,
    apply_bias_mask,
    bias_mask,
    build_batch,
    kernel_error,
    make_surrogate,
    surrogate_features,
    surrogate_kernel,
    surrogate_loss,
    surrogate_posterior,
    target_kernel,
    train_surrogate,
)

__version__ = "0.1.0"
