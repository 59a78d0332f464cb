"""Likelihoods over network outputs: log-probabilities, gradients, curvature.

The softmax likelihood is the production path for classification; the
Gaussian likelihood exists so that linear-Gaussian conjugate identities
can serve as exact oracles in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def softmax(f: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis."""
    f = np.asarray(f, dtype=np.float64)
    z = f - f.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    z = f - f.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class SoftmaxLikelihood:
    """Categorical likelihood with logits f: p(y|f) = softmax(f)_y."""

    def log_prob(self, y, f) -> np.ndarray:
        """log p(y|f); batched over a leading axis when f is (B, C)."""
        f = np.asarray(f, dtype=np.float64)
        ls = log_softmax(f)
        y = np.asarray(y)
        if f.ndim == 1:
            return ls[int(y)]
        return ls[np.arange(f.shape[0]), y.astype(int)]

    def nll_grad(self, y, f) -> np.ndarray:
        """Gradient of -log p(y|f) w.r.t. f: softmax(f) - onehot(y)."""
        f = np.asarray(f, dtype=np.float64)
        p = softmax(f)
        g = p.copy()
        y = np.asarray(y)
        if f.ndim == 1:
            g[int(y)] -= 1.0
        else:
            g[np.arange(f.shape[0]), y.astype(int)] -= 1.0
        return g

    def curvature(self, y, f) -> np.ndarray:
        """Hessian of -log p(y|f) w.r.t. f: diag(p) - p p^T.

        Independent of y for softmax; the argument is kept for interface
        symmetry with other likelihoods.
        """
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 1:
            raise ValueError("curvature is per-example; pass a single output vector")
        p = softmax(f)
        return np.diag(p) - np.outer(p, p)


@dataclass(frozen=True)
class GaussianLikelihood:
    """Isotropic Gaussian likelihood y ~ N(f, noise_variance * I)."""

    noise_variance: float = 1.0

    def log_prob(self, y, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        c = f.shape[-1]
        sq = ((y - f) ** 2).sum(axis=-1)
        return -0.5 * sq / self.noise_variance - 0.5 * c * np.log(2.0 * np.pi * self.noise_variance)

    def nll_grad(self, y, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return (f - y) / self.noise_variance

    def curvature(self, y, f) -> np.ndarray:
        f = np.asarray(f, dtype=np.float64)
        if f.ndim != 1:
            raise ValueError("curvature is per-example; pass a single output vector")
        return np.eye(f.shape[0]) / self.noise_variance


Likelihood = SoftmaxLikelihood | GaussianLikelihood
