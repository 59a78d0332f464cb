"""Surrogate feature network whose inner products replicate the tangent kernel.

A second network g maps an input to a C-by-m feature block; stacking the
blocks of a batch row-wise gives G with Q = G G^T as the surrogate kernel.
Training minimizes the mean squared difference between Q and a sketched
target kernel K built from one shared JVP projection per step. Optionally
the cross-covariances between training and context points in K are zeroed
("biasing"), which pushes context-like inputs back toward the prior and
sharpens OOD detection.

Kernels over a batch use the flattened (input, class) indexing described
in `lla`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .diff import forward, forward_batch, vjp_batch
from .lla import PredictiveGaussian, floor_psd, ntk_gram
from .models import AdamState, OptimizerConfig, TrainingDivergedError, init_params
from .network import Dense, NetworkSpec, ParamVector, ShapeError
from .sketch import BATCH_STREAM, projection_seed, sample_projection, sketch_batch


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SurrogateSpec:
    """Feature network with C*m outputs, reshaped to C-by-m per input."""

    spec: NetworkSpec
    n_classes: int
    m: int
    phi: ParamVector

    def __post_init__(self):
        if self.spec.output_dim != self.n_classes * self.m:
            raise ShapeError(
                f"surrogate outputs {self.spec.output_dim} values, "
                f"need C*m = {self.n_classes * self.m}"
            )


def widen_output(base_spec: NetworkSpec, m: int) -> NetworkSpec:
    """Base architecture with the final dense layer widened to C*m outputs."""
    last = base_spec.layers[-1]
    if not isinstance(last, Dense):
        raise ShapeError("surrogate widening requires a dense output layer")
    widened = Dense(last.in_dim, base_spec.output_dim * m, last.bias)
    return NetworkSpec(base_spec.layers[:-1] + (widened,), base_spec.input_shape, base_spec.output_dim * m)


def make_surrogate(base_spec: NetworkSpec, m: int, seed) -> SurrogateSpec:
    """Fresh surrogate of the base architecture; parameters are not copied."""
    spec = widen_output(base_spec, m)
    return SurrogateSpec(spec, base_spec.output_dim, m, init_params(spec, seed))


def surrogate_features(surrogate: SurrogateSpec, x) -> np.ndarray:
    """Feature block g(x), shape (C, m), class-major rows."""
    return forward(surrogate.spec, surrogate.phi, x).reshape(surrogate.n_classes, surrogate.m)


def surrogate_features_batch(surrogate: SurrogateSpec, xs) -> np.ndarray:
    """Stacked feature blocks, shape (B*C, m)."""
    out = forward_batch(surrogate.spec, surrogate.phi, xs)
    return out.reshape(out.shape[0] * surrogate.n_classes, surrogate.m)


def surrogate_kernel(g1: np.ndarray, g2: np.ndarray) -> np.ndarray:
    """Inner-product kernel of two feature blocks (or stacked feature matrices)."""
    return g1 @ g2.T


def surrogate_kernel_fn(surrogate: SurrogateSpec):
    """Gram closure over input lists, usable as a Woodbury base kernel."""

    def kernel(xs1, xs2=None):
        g1 = surrogate_features_batch(surrogate, np.asarray(xs1, dtype=np.float64))
        if xs2 is None:
            return g1 @ g1.T
        g2 = surrogate_features_batch(surrogate, np.asarray(xs2, dtype=np.float64))
        return g1 @ g2.T

    return kernel


@dataclass(frozen=True)
class BatchComposition:
    """Concatenated training and context inputs with per-input partition tags."""

    inputs: np.ndarray
    is_context: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "is_context", np.asarray(self.is_context, dtype=bool))
        if len(self.inputs) != len(self.is_context):
            raise ValueError("tags must align with inputs")
        if self.is_context.all() or len(self.inputs) == 0:
            raise ValueError("batch needs at least one training input")


def build_batch(train_batch, context_batch=None) -> BatchComposition:
    train_batch = np.asarray(train_batch, dtype=np.float64)
    if train_batch.shape[0] == 0:
        raise ValueError("train batch must be nonempty")
    if context_batch is None or len(context_batch) == 0:
        return BatchComposition(train_batch, np.zeros(train_batch.shape[0], dtype=bool))
    context_batch = np.asarray(context_batch, dtype=np.float64)
    inputs = np.concatenate([train_batch, context_batch], axis=0)
    tags = np.concatenate(
        [np.zeros(train_batch.shape[0], dtype=bool), np.ones(context_batch.shape[0], dtype=bool)]
    )
    return BatchComposition(inputs, tags)


def bias_mask(batch: BatchComposition, n_classes: int) -> np.ndarray:
    """0/1 mask over (input, class) pairs; zero iff the inputs lie in different partitions."""
    same = batch.is_context[:, None] == batch.is_context[None, :]
    return np.kron(same.astype(np.float64), np.ones((n_classes, n_classes)))


def apply_bias_mask(kernel: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero the cross-partition entries; within-partition entries pass through bitwise."""
    if kernel.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match kernel {kernel.shape}")
    return np.where(mask != 0.0, kernel, 0.0)


def target_kernel(base_spec: NetworkSpec, theta_star, batch: BatchComposition, v) -> np.ndarray:
    """Sketched kernel target for one projection: outer product of the stacked sketches.

    Costs one JVP per batch input (not per pair).
    """
    z = sketch_batch(base_spec, theta_star, batch.inputs, v)
    w = z.reshape(-1)
    return np.outer(w, w)


def _target_mean(base_spec, theta_star, batch, projections, biased):
    ks = [target_kernel(base_spec, theta_star, batch, v) for v in projections]
    if biased:
        mask = bias_mask(batch, base_spec.output_dim)
        ks = [apply_bias_mask(k, mask) for k in ks]
    return ks, sum(ks) / len(ks)


def surrogate_loss(
    surrogate: SurrogateSpec,
    batch: BatchComposition,
    projections,
    base_spec: NetworkSpec,
    theta_star,
    biased: bool = False,
) -> float:
    """Mean over kernel entries (and projections) of (K - Q)^2; zero iff Q matches."""
    if not isinstance(projections, (list, tuple)):
        projections = [projections]
    ks, _ = _target_mean(base_spec, theta_star, batch, projections, biased)
    g = surrogate_features_batch(surrogate, batch.inputs)
    q = g @ g.T
    return float(np.mean([np.mean((k - q) ** 2) for k in ks]))


def surrogate_loss_and_grad(
    surrogate: SurrogateSpec,
    batch: BatchComposition,
    projections,
    base_spec: NetworkSpec,
    theta_star,
    biased: bool = False,
) -> tuple[float, np.ndarray]:
    """Loss plus its gradient in the surrogate's flat parameters.

    d/dG of mean((K - Q)^2) with Q = G G^T is (4/n)(Q - Kbar) G, which is
    pushed through the feature network with one batched VJP.
    """
    if not isinstance(projections, (list, tuple)):
        projections = [projections]
    ks, k_mean = _target_mean(base_spec, theta_star, batch, projections, biased)
    g = surrogate_features_batch(surrogate, batch.inputs)
    q = g @ g.T
    loss = float(np.mean([np.mean((k - q) ** 2) for k in ks]))
    n_entries = q.size
    dq = (q - k_mean) * (2.0 / n_entries)
    dg = (dq + dq.T) @ g  # (B*C, m)
    cotangents = dg.reshape(len(batch.inputs), -1)  # row-major = class-major layout
    grad = vjp_batch(surrogate.spec, surrogate.phi, batch.inputs, cotangents)
    return loss, grad


@dataclass
class SurrogateConfig:
    """Training configuration for the surrogate fit."""

    m: int = 8
    steps: int = 5000
    batch_size: int = 32
    context_batch_size: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    biased: bool = False
    sketches_per_step: int = 1
    distribution: str = "rademacher"


@dataclass
class SurrogateResult:
    surrogate: SurrogateSpec
    loss_trace: np.ndarray


def train_surrogate(
    base_spec: NetworkSpec,
    theta_star,
    train_inputs,
    config: SurrogateConfig,
    context_inputs=None,
) -> SurrogateResult:
    """Fit the surrogate by mini-batch descent with a fresh projection per step.

    The projection is shared by every input in the step's batch, so both
    factors of each target entry see the same v. Context batches are drawn
    uniformly with replacement from the context set.
    """
    train_inputs = np.asarray(train_inputs, dtype=np.float64)
    n_context = 0 if context_inputs is None else len(context_inputs)
    if config.biased and n_context == 0:
        raise ConfigurationError("biased training requires a context dataset")
    if config.context_batch_size > 0 and n_context == 0:
        raise ConfigurationError("context_batch_size > 0 requires a context dataset")
    if n_context:
        context_inputs = np.asarray(context_inputs, dtype=np.float64)

    surrogate = make_surrogate(base_spec, config.m, config.seed)
    phi = surrogate.phi.values.copy()
    opt = OptimizerConfig(
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
    )
    state = AdamState.zeros(phi.size)
    n_train = train_inputs.shape[0]
    p_base = base_spec.param_count
    trace = np.empty(config.steps)
    for t in range(config.steps):
        rng = np.random.default_rng((config.seed, BATCH_STREAM, t))
        idx = rng.integers(0, n_train, size=min(config.batch_size, n_train))
        ctx = None
        if config.context_batch_size > 0:
            ctx = context_inputs[rng.integers(0, n_context, size=config.context_batch_size)]
        batch = build_batch(train_inputs[idx], ctx)
        projections = [
            sample_projection(p_base, config.distribution, projection_seed(config.seed, t, s))
            for s in range(config.sketches_per_step)
        ]
        loss, grad = surrogate_loss_and_grad(
            replace(surrogate, phi=surrogate.phi.replace_values(phi)),
            batch,
            projections,
            base_spec,
            theta_star,
            config.biased,
        )
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite surrogate loss at step {t}")
        trace[t] = loss
        phi = phi + state.update(grad, opt)
    trained = replace(surrogate, phi=surrogate.phi.replace_values(phi))
    return SurrogateResult(trained, trace)


def kernel_error(base_spec: NetworkSpec, theta_star, surrogate: SurrogateSpec, eval_inputs) -> float:
    """Frobenius distance between the surrogate gram and the exact NTK gram."""
    eval_inputs = np.asarray(eval_inputs, dtype=np.float64)
    exact = ntk_gram(base_spec, theta_star, eval_inputs)
    g = surrogate_features_batch(surrogate, eval_inputs)
    return float(np.linalg.norm(g @ g.T - exact))


class FeaturePosterior:
    """Scalable posterior in the m-dimensional surrogate feature space.

    The precision sum_n g(x_n)^T Lambda_n g(x_n) + sigma0^-2 I_m is built in
    one data pass; its size is independent of N and P.
    """

    def __init__(self, base_spec, theta_star, surrogate, train_inputs, curvatures, sigma0):
        self.base_spec = base_spec
        self.theta_star = theta_star
        self.surrogate = surrogate
        self.sigma0 = float(sigma0)
        a = np.eye(surrogate.m) / self.sigma0**2
        for x, lam in zip(train_inputs, curvatures):
            g = surrogate_features(surrogate, x)
            a += g.T @ (lam @ g)
        self._factor = cho_factor(a, lower=True)

    def covariance(self, x_star) -> np.ndarray:
        g = surrogate_features(self.surrogate, x_star)
        return g @ cho_solve(self._factor, g.T)

    def predictive(self, x_star) -> PredictiveGaussian:
        mean = forward(self.base_spec, self.theta_star, x_star)
        return PredictiveGaussian(mean, floor_psd(self.covariance(x_star)))


def surrogate_posterior(
    base_spec: NetworkSpec,
    theta_star,
    surrogate: SurrogateSpec,
    train_inputs,
    curvatures,
    sigma0: float,
) -> FeaturePosterior:
    if not isinstance(surrogate, SurrogateSpec):
        raise ValueError("surrogate is not fitted")
    return FeaturePosterior(base_spec, theta_star, surrogate, train_inputs, curvatures, sigma0)
