"""Exact linearized-Laplace machinery.

Builds the generalized Gauss-Newton precision sum_n J_n^T Lambda_n J_n
+ sigma0^-2 I from explicit Jacobians, evaluates the posterior predictive
kernel J(x1) Sigma J(x2)^T through two algebraically equivalent paths (a
P-space Cholesky solve and an N*C-space Woodbury solve that never inverts
the singular softmax curvature), and scores prior scales by the Laplace
estimate of the log marginal likelihood.

Kernels over multiple inputs are plain 2-D arrays indexed by flattened
(input, class) pairs: entry (i*C + a, j*C + b) couples class a of input i
with class b of input j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .diff import forward, forward_batch
from .likelihoods import Likelihood, SoftmaxLikelihood
from .models import ORACLE_ENTRY_LIMIT, OracleScaleError, exact_jacobian
from .network import NetworkSpec

WOODBURY_LIMIT = 5000


def curvature(likelihood: Likelihood, y, f) -> np.ndarray:
    """Per-example C-by-C curvature of the negative log-likelihood at outputs f."""
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite outputs")
    curv_fn = getattr(likelihood, "curvature", None)
    if curv_fn is None:
        raise TypeError(f"unknown likelihood {likelihood!r}")
    if isinstance(likelihood, SoftmaxLikelihood):
        y_int = int(y)
        if not 0 <= y_int < f.shape[0]:
            raise ValueError(f"label {y_int} outside [0, {f.shape[0]})")
    return curv_fn(y, f)


@dataclass(frozen=True)
class GGNPrecision:
    """P-by-P precision matrix together with the prior scale that floors it."""

    matrix: np.ndarray
    sigma0: float


def ggn_precision(jacobians, curvatures, sigma0: float) -> GGNPrecision:
    """Accumulates sum_n J_n^T Lambda_n J_n + sigma0^-2 I in one pass."""
    if len(jacobians) == 0:
        raise ValueError("at least one example is required")
    if len(jacobians) != len(curvatures):
        raise ValueError("jacobians and curvatures must align")
    if sigma0 <= 0.0:
        raise ValueError("sigma0 must be positive")
    c, p = jacobians[0].shape
    if c * p > ORACLE_ENTRY_LIMIT or p * p > 10 * ORACLE_ENTRY_LIMIT:
        raise OracleScaleError(f"oracle scale exceeded for P={p}, C={c}")
    h = np.zeros((p, p))
    for jac, lam in zip(jacobians, curvatures):
        h += jac.T @ (lam @ jac)
    h[np.diag_indices_from(h)] += sigma0**-2
    return GGNPrecision(h, float(sigma0))


def ntk(spec: NetworkSpec, theta, x1, x2) -> np.ndarray:
    """Exact tangent kernel J(x1) J(x2)^T via the Jacobian oracle, shape (C, C)."""
    return exact_jacobian(spec, theta, x1) @ exact_jacobian(spec, theta, x2).T


def ntk_gram(spec: NetworkSpec, theta, xs1, xs2=None) -> np.ndarray:
    """Stacked tangent kernel over input sets, shape (n1*C, n2*C)."""
    j1 = np.concatenate([exact_jacobian(spec, theta, x) for x in xs1], axis=0)
    if xs2 is None:
        return j1 @ j1.T
    j2 = np.concatenate([exact_jacobian(spec, theta, x) for x in xs2], axis=0)
    return j1 @ j2.T


def ntk_kernel_fn(spec: NetworkSpec, theta):
    """Closure evaluating the exact NTK gram, usable as a Woodbury base kernel."""

    def kernel(xs1, xs2=None):
        return ntk_gram(spec, theta, xs1, xs2)

    return kernel


def lla_kernel_direct(spec: NetworkSpec, theta, x1, x2, precision: GGNPrecision) -> np.ndarray:
    """Posterior kernel J(x1) Sigma J(x2)^T via a Cholesky solve of the P-space precision."""
    j1 = exact_jacobian(spec, theta, x1)
    j2 = exact_jacobian(spec, theta, x2)
    factor = cho_factor(precision.matrix, lower=True)
    return j1 @ cho_solve(factor, j2.T)


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues below -tol are rejected."""
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    if w.min() < -tol * max(1.0, abs(w.max())):
        raise ValueError(f"curvature matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _curvature_sqrt_blockdiag(curvatures) -> np.ndarray:
    """Block-diagonal matrix of the per-example symmetric square roots Lambda_n^(1/2)."""
    c = curvatures[0].shape[0]
    n = len(curvatures)
    out = np.zeros((n * c, n * c))
    for i, lam in enumerate(curvatures):
        out[i * c : (i + 1) * c, i * c : (i + 1) * c] = _psd_sqrt(lam)
    return out


def lla_kernel_woodbury(x1, x2, train_inputs, curvatures, sigma0: float, kernel_fn) -> np.ndarray:
    """Posterior kernel through the N*C-space solve.

    Computes sigma0^2 k(x1,x2)
    - sigma0^4 k(x1,X) L (I + sigma0^2 L k(X,X) L)^-1 L k(X,x2)
    with L the block diagonal of Lambda_n^(1/2); the curvature is never
    inverted, so singular softmax curvature is handled exactly. Any base
    kernel works, including the surrogate feature kernel.
    """
    n = len(train_inputs)
    if n != len(curvatures):
        raise ValueError("curvatures must align with train inputs")
    c = curvatures[0].shape[0] if n else 0
    if n * c > WOODBURY_LIMIT:
        raise OracleScaleError(f"N*C = {n * c} exceeds the Woodbury limit {WOODBURY_LIMIT}")
    k12 = kernel_fn([x1], [x2])
    if n == 0:
        return sigma0**2 * k12
    big_l = _curvature_sqrt_blockdiag(curvatures)
    k_xx = kernel_fn(train_inputs, train_inputs)
    k_1x = kernel_fn([x1], train_inputs)
    k_x2 = kernel_fn(train_inputs, [x2])
    m = np.eye(n * c) + sigma0**2 * (big_l @ k_xx @ big_l)
    factor = cho_factor(m, lower=True)
    solve = cho_solve(factor, big_l @ k_x2)
    return sigma0**2 * k12 - sigma0**4 * (k_1x @ big_l) @ solve


@dataclass(frozen=True)
class PredictiveGaussian:
    """Gaussian over outputs at one query input."""

    mean: np.ndarray
    cov: np.ndarray


def floor_psd(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues at zero."""
    sym = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(sym)
    if w.min() >= 0.0:
        return sym
    return (v * np.clip(w, 0.0, None)) @ v.T


class ExactPosterior:
    """Fitted LLA posterior using the P-space precision."""

    def __init__(self, spec: NetworkSpec, theta, precision: GGNPrecision):
        self.spec = spec
        self.theta = theta
        self.precision = precision
        self._factor = cho_factor(precision.matrix, lower=True)

    def covariance(self, x_star) -> np.ndarray:
        j = exact_jacobian(self.spec, self.theta, x_star)
        return j @ cho_solve(self._factor, j.T)

    def predictive(self, x_star) -> PredictiveGaussian:
        mean = forward(self.spec, self.theta, x_star)
        return PredictiveGaussian(mean, floor_psd(self.covariance(x_star)))


class WoodburyPosterior:
    """Fitted LLA posterior in the N*C space, for any base kernel."""

    def __init__(self, spec: NetworkSpec, theta, train_inputs, curvatures, sigma0, kernel_fn):
        n = len(train_inputs)
        c = curvatures[0].shape[0] if n else 0
        if n * c > WOODBURY_LIMIT:
            raise OracleScaleError(f"N*C = {n * c} exceeds the Woodbury limit {WOODBURY_LIMIT}")
        self.spec = spec
        self.theta = theta
        self.train_inputs = train_inputs
        self.sigma0 = float(sigma0)
        self.kernel_fn = kernel_fn
        self._big_l = _curvature_sqrt_blockdiag(curvatures) if n else None
        if n:
            k_xx = kernel_fn(train_inputs, train_inputs)
            m = np.eye(n * c) + self.sigma0**2 * (self._big_l @ k_xx @ self._big_l)
            self._factor = cho_factor(m, lower=True)

    def covariance(self, x_star) -> np.ndarray:
        k_ss = self.kernel_fn([x_star], [x_star])
        if self._big_l is None:
            return self.sigma0**2 * k_ss
        k_sx = self.kernel_fn([x_star], self.train_inputs)
        half = self._big_l @ k_sx.T
        return self.sigma0**2 * k_ss - self.sigma0**4 * half.T @ cho_solve(self._factor, half)

    def predictive(self, x_star) -> PredictiveGaussian:
        mean = forward(self.spec, self.theta, x_star)
        return PredictiveGaussian(mean, floor_psd(self.covariance(x_star)))


def fit_exact(spec: NetworkSpec, likelihood: Likelihood, theta, dataset, sigma0: float) -> ExactPosterior:
    """Curvature pass over the data plus Jacobian assembly, then the P-space precision."""
    jacobians, curvatures = [], []
    fs = forward_batch(spec, theta, dataset.inputs)
    for x, y, f in zip(dataset.inputs, dataset.labels, fs):
        jacobians.append(exact_jacobian(spec, theta, x))
        curvatures.append(curvature(likelihood, y, f))
    return ExactPosterior(spec, theta, ggn_precision(jacobians, curvatures, sigma0))


def fit_woodbury(
    spec: NetworkSpec,
    likelihood: Likelihood,
    theta,
    dataset,
    sigma0: float,
    kernel_fn=None,
) -> WoodburyPosterior:
    fs = forward_batch(spec, theta, dataset.inputs)
    curvatures = [curvature(likelihood, y, f) for y, f in zip(dataset.labels, fs)]
    if kernel_fn is None:
        kernel_fn = ntk_kernel_fn(spec, theta)
    return WoodburyPosterior(spec, theta, list(dataset.inputs), curvatures, sigma0, kernel_fn)


def predictive(posterior, x_star) -> PredictiveGaussian:
    """Predictive Gaussian at x_star: MAP mean, floored posterior covariance."""
    if posterior is None or not hasattr(posterior, "predictive"):
        raise ValueError("posterior is not fitted")
    return posterior.predictive(x_star)


def _gauss_newton_eigvals(spec, likelihood, dataset, theta) -> np.ndarray:
    """Eigenvalues of the data term sum_n J_n^T Lambda_n J_n (prior excluded)."""
    p = spec.param_count
    h = np.zeros((p, p))
    if len(dataset.inputs) > 0:
        fs = forward_batch(spec, theta, dataset.inputs)
        for x, y, f in zip(dataset.inputs, dataset.labels, fs):
            jac = exact_jacobian(spec, theta, x)
            h += jac.T @ (curvature(likelihood, y, f) @ jac)
    return np.clip(np.linalg.eigvalsh(0.5 * (h + h.T)), 0.0, None)


def _evidence(loglik: float, theta_sq: float, p: int, sigma0: float, data_eigvals) -> float:
    logdet_precision = float(np.log(data_eigvals + sigma0**-2).sum())
    return (
        loglik
        - theta_sq / (2.0 * sigma0**2)
        - 0.5 * p * np.log(2.0 * np.pi * sigma0**2)
        - 0.5 * logdet_precision
        + 0.5 * p * np.log(2.0 * np.pi)
    )


def log_marginal_likelihood(
    spec: NetworkSpec,
    likelihood: Likelihood,
    dataset,
    theta_star,
    sigma0: float,
    precision: GGNPrecision | None = None,
) -> float:
    """Laplace log-evidence with the GGN Hessian at theta_star.

    sum_n log p(y_n|f_n) - ||theta||^2/(2 sigma0^2) - (P/2) log(2 pi sigma0^2)
    + (1/2) log det Sigma_GGN + (P/2) log(2 pi).
    """
    theta = theta_star.values if hasattr(theta_star, "values") else np.asarray(theta_star)
    p = theta.size
    if len(dataset.inputs) > 0:
        fs = forward_batch(spec, theta, dataset.inputs)
        loglik = float(np.sum(likelihood.log_prob(dataset.labels, fs)))
    else:
        loglik = 0.0
    if precision is not None:
        if abs(precision.sigma0 - sigma0) > 1e-12 * max(1.0, sigma0):
            raise ValueError("precision was built for a different sigma0")
        eigvals = np.linalg.eigvalsh(0.5 * (precision.matrix + precision.matrix.T))
        if eigvals.min() <= 0.0:
            raise ValueError("precision is not positive definite")
        data_eigvals = np.clip(eigvals - sigma0**-2, 0.0, None)
    else:
        data_eigvals = _gauss_newton_eigvals(spec, likelihood, dataset, theta)
    return _evidence(loglik, float(theta @ theta), p, sigma0, data_eigvals)


def default_prior_grid(num: int = 25) -> np.ndarray:
    return np.logspace(-2.0, 2.0, num)


def tune_prior(spec: NetworkSpec, likelihood: Likelihood, dataset, theta_star, grid=None) -> float:
    """Grid argmax of the log evidence; ties break toward the smaller sigma0.

    The data-dependent curvature term is sigma0-independent, so it is
    eigendecomposed once and reused across the grid.
    """
    grid = default_prior_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0.0):
        raise ValueError("grid must be nonempty and positive")
    theta = theta_star.values if hasattr(theta_star, "values") else np.asarray(theta_star)
    if len(dataset.inputs) > 0:
        fs = forward_batch(spec, theta, dataset.inputs)
        loglik = float(np.sum(likelihood.log_prob(dataset.labels, fs)))
    else:
        loglik = 0.0
    data_eigvals = _gauss_newton_eigvals(spec, likelihood, dataset, theta)
    theta_sq = float(theta @ theta)
    order = np.argsort(grid, kind="stable")
    best_sigma, best_val = None, -np.inf
    for idx in order:
        s = float(grid[idx])
        val = _evidence(loglik, theta_sq, theta.size, s, data_eigvals)
        if val > best_val:
            best_sigma, best_val = s, val
    return best_sigma
