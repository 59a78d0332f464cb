"""Parameter initialization, MAP training, and the exact Jacobian oracle."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diff import forward_batch, vjp, vjp_batch
from .likelihoods import Likelihood, SoftmaxLikelihood
from .network import NetworkSpec, ParamVector, param_layout

ORACLE_ENTRY_LIMIT = 10**7


class OracleScaleError(RuntimeError):
    """Explicit-matrix oracle requested beyond the desk-scale entry budget."""


class TrainingDivergedError(RuntimeError):
    pass


def init_params(spec: NetworkSpec, seed) -> ParamVector:
    """Zero-mean weights with std 1/sqrt(fan-in), zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    layout = param_layout(spec)
    values = np.zeros(spec.param_count)
    for entry in layout:
        if entry.name.endswith(".weight"):
            fan_in = int(np.prod(entry.shape[1:]))
            block = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=entry.shape)
            values[entry.offset : entry.offset + entry.size] = block.ravel()
    return ParamVector(values, layout)


@dataclass
class OptimizerConfig:
    """Adaptive-moment gradient descent settings (fixed defaults for reproducibility)."""

    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))

    def update(self, grad: np.ndarray, cfg: OptimizerConfig) -> np.ndarray:
        """Returns the parameter delta for this gradient and advances the state."""
        self.t += 1
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad * grad
        mhat = self.m / (1.0 - cfg.beta1**self.t)
        vhat = self.v / (1.0 - cfg.beta2**self.t)
        return -cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)


def map_loss_and_grad(
    spec: NetworkSpec,
    likelihood: Likelihood,
    theta: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    sigma0: float,
    n_total: int,
) -> tuple[float, np.ndarray]:
    """Mean batch NLL plus the prior penalty ||theta||^2 / (2 sigma0^2 N), with gradient."""
    fs = forward_batch(spec, theta, xs)
    b = xs.shape[0]
    nll = -likelihood.log_prob(ys, fs).mean()
    penalty = float(theta @ theta) / (2.0 * sigma0**2 * n_total)
    grad = vjp_batch(spec, theta, xs, likelihood.nll_grad(ys, fs) / b)
    grad += theta / (sigma0**2 * n_total)
    return nll + penalty, grad


@dataclass
class MapResult:
    params: ParamVector
    loss_trace: np.ndarray


def train_map(
    spec: NetworkSpec,
    dataset,
    prior_sigma0: float,
    config: OptimizerConfig,
    likelihood: Likelihood = SoftmaxLikelihood(),
) -> MapResult:
    """Mini-batch MAP training; deterministic per (seed, config)."""
    if prior_sigma0 <= 0.0:
        raise ValueError("prior_sigma0 must be positive")
    xs, ys = np.asarray(dataset.inputs, dtype=np.float64), np.asarray(dataset.labels)
    n = xs.shape[0]
    if n == 0:
        raise ValueError("dataset is empty")
    theta = init_params(spec, config.seed).values.copy()
    state = AdamState.zeros(theta.size)
    rng = np.random.default_rng((config.seed, 1))
    trace = np.empty(config.steps)
    for t in range(config.steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        loss, grad = map_loss_and_grad(spec, likelihood, theta, xs[idx], ys[idx], prior_sigma0, n)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite training loss at step {t}")
        trace[t] = loss
        theta = theta + state.update(grad, config)
    return MapResult(ParamVector(theta, param_layout(spec)), trace)


def exact_jacobian(spec: NetworkSpec, theta, x) -> np.ndarray:
    """Explicit (C, P) Jacobian assembled from C reverse passes.

    Guarded so the oracle is never silently run beyond desk scale.
    """
    c, p = spec.output_dim, spec.param_count
    if c * p > ORACLE_ENTRY_LIMIT:
        raise OracleScaleError(
            f"oracle scale exceeded: C*P = {c * p} > {ORACLE_ENTRY_LIMIT}; "
            "use the sketch/surrogate path instead"
        )
    jac = np.empty((c, p))
    for a in range(c):
        one_hot = np.zeros(c)
        one_hot[a] = 1.0
        jac[a] = vjp(spec, theta, x, one_hot)
    return jac
